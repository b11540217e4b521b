"""Exception hierarchy.

Every library error derives from :class:`BilrpError`.  Errors caused by bad
input data also derive from :class:`ValueError`, which is what the CLI maps to
exit code 1; plain ``OSError`` maps to exit code 2.
"""


class BilrpError(Exception):
    pass


class ValidationError(BilrpError, ValueError):
    pass


class ConfigError(ValidationError):
    pass


class ContainerFormatError(ValidationError):
    pass


class MissingTensor(ValidationError):
    def __init__(self, name):
        super().__init__(f"missing tensor {name!r}")
        self.name = name


class ShapeMismatch(ValidationError):
    def __init__(self, name, expected, found):
        super().__init__(
            f"tensor {name!r}: expected shape {tuple(expected)}, found {tuple(found)}"
        )
        self.name = name
        self.expected = tuple(expected)
        self.found = tuple(found)


class UnsupportedDtype(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    pass


class SequenceTooLong(ValidationError):
    pass


class NonFiniteActivation(ValidationError):
    pass


class MissingPoolingWeights(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class ZeroNormWithNormalization(ValidationError):
    pass


class DimensionOutOfRange(ValidationError):
    pass


class TraceMismatch(ValidationError):
    pass


class StepOutOfRange(ValidationError):
    pass


class DegenerateInput(ValidationError):
    pass


class MissingPosTags(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class NormalizationMismatch(ValidationError):
    pass


class OffsetOutOfRange(ValidationError):
    pass


class EmptyNounSet(ValidationError):
    pass


class UnknownToken(ValidationError):
    pass


class LineError(ValidationError):
    """Base for errors tied to one line of a JSONL input file."""

    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MalformedJson(LineError):
    pass


class FieldLengthMismatch(LineError):
    pass


class UnknownTokenId(LineError):
    pass
