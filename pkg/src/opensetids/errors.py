"""Exception hierarchy shared by every stage of the detector."""


class OpenSetIDSError(Exception):
    """Base class for all errors raised by this package."""


class DataError(OpenSetIDSError):
    """Input data is malformed or unusable."""


class BadMagic(DataError):
    pass


class TruncatedHeader(DataError):
    pass


class EmptyFlow(DataError):
    pass


class EmptyTrainingSet(DataError):
    pass


class SingleClass(DataError):
    pass


class ClassTooSmall(DataError):
    def __init__(self, class_name, count, minimum=2):
        self.class_name = class_name
        self.count = count
        super().__init__(
            f"class {class_name!r} has {count} sample(s); at least {minimum} required"
        )


class EmptyClass(DataError):
    pass


class EmptyLossList(DataError):
    pass


class TooFewSamples(DataError):
    pass


class ShapeMismatch(OpenSetIDSError, ValueError):
    pass


class BackwardBeforeForward(OpenSetIDSError, RuntimeError):
    pass


class CalibrationMissing(OpenSetIDSError, KeyError):
    pass


class BundleError(DataError):
    pass


class VersionMismatch(BundleError):
    pass


class CorruptSection(BundleError):
    def __init__(self, section, reason=""):
        self.section = section
        msg = f"bundle section {section!r} is corrupt"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class BundleClassMismatch(BundleError):
    pass


class DegenerateTail(UserWarning):
    """All tail distances are equal; the Weibull shape is capped."""
