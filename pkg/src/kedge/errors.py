class KedgeError(Exception):
    """Base class for engine errors."""


class UnknownEntity(KedgeError):
    pass
