class CDFaceError(Exception):
    pass


class ContractViolation(CDFaceError, ValueError):
    """An operation was called outside its preconditions."""


class PartitionError(ContractViolation):
    """Region partition and template/motion disagree."""


class ConfigError(CDFaceError, ValueError):
    pass


class ContainerError(CDFaceError, IOError):
    """Malformed, corrupted or mismatched on-disk container."""
