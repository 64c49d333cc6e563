class FtlError(Exception):
    """Root of every error raised by the ftl and bench packages."""


class ConfigurationError(FtlError):
    pass


class UnknownPresetError(ConfigurationError):
    pass


class FlashError(FtlError):
    """A NAND rule or device condition was violated by a request."""

    def __init__(self, message, address=None):
        super().__init__(message)
        self.address = address


class SequencingError(FlashError):
    pass


class OverwriteError(FlashError):
    pass


class BadBlockError(FlashError):
    pass


class AddressError(FlashError):
    pass


class BackpressureError(FlashError):
    """Queue full; the caller is expected to retry."""


class DeviceHaltedError(FlashError):
    pass


class ParityError(FlashError):
    pass


class ExhaustionError(FtlError):
    """No free block left where one was required."""

    def __init__(self, message, bank=None):
        super().__init__(message)
        self.bank = bank


class ContractViolation(FtlError):
    pass


class GcAbortedError(FtlError):
    pass


class FlushError(FtlError):
    def __init__(self, message, unflushed_lpns=()):
        super().__init__(message)
        self.unflushed_lpns = sorted(unflushed_lpns)


class CheckpointError(FtlError):
    pass


class CorruptImageError(FtlError):
    pass


class LifecycleError(FtlError):
    pass


class SchedulingError(FtlError):
    pass


class AgingError(FtlError):
    pass
