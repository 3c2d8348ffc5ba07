"""Exception hierarchy shared by every lfx module."""


class LfxError(ValueError):
    """Base class for input or contract violations raised by lfx."""


# light-field container and file format
class BadMagic(LfxError):
    pass


class TruncatedFile(LfxError):
    pass


class DimensionOverflow(LfxError):
    pass


class IoFailure(LfxError, OSError):
    pass


class OutOfRange(LfxError, IndexError):
    pass


class KTooLarge(LfxError):
    pass


# refocusing
class SlopeTooLarge(LfxError):
    pass


class UnsortedSlopes(LfxError):
    pass


class EmptySlopes(LfxError):
    pass


class NonPositiveInput(LfxError):
    pass


class ImageTooSmall(LfxError):
    pass


# tensors, adapter, encoder
class ShapeMismatch(LfxError):
    pass


class EmptyAxis(LfxError):
    pass


class EmptyTokens(EmptyAxis):
    pass


class NonFiniteValue(LfxError, ArithmeticError):
    pass


class NonFiniteLoss(NonFiniteValue):
    pass


class DivergedLoss(NonFiniteValue):
    pass


class ModeParamMismatch(LfxError):
    pass


class IndivisibleDims(LfxError):
    pass


# metrics
class LabelOutOfRange(LfxError):
    pass


class EmptyMatrix(LfxError):
    pass
