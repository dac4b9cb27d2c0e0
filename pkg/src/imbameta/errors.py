"""Exception types shared across modules."""


class RunAbort(RuntimeError):
    """Non-finite numerics; the run cannot continue."""


class NotReady(Exception):
    """Not enough history or data yet (distinct from an error)."""


class StalePlanError(RuntimeError):
    """A sampling plan was used past its refresh window."""


class StreamFormatError(ValueError):
    def __init__(self, line_no, msg):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no
