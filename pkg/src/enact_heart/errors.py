"""Exception hierarchy shared by every pipeline stage.

Each error carries a stable ``code`` so the command line can print
``error_code: message`` lines that scripts can parse.
"""


class EnactError(Exception):
    code = "enact_error"


class MalformedHeader(EnactError):
    code = "malformed_header"


class UnsupportedEncoding(EnactError):
    code = "unsupported_encoding"


class EmptyPayload(EnactError):
    code = "empty_payload"


class UnlabeledFile(EnactError):
    code = "unlabeled_file"


class DuplicatePath(EnactError):
    code = "duplicate_path"


class ClassTooSmall(EnactError):
    code = "class_too_small"


class AlreadyAugmented(EnactError):
    code = "already_augmented"


class TooShort(EnactError):
    code = "too_short"


class LengthMismatch(EnactError):
    code = "length_mismatch"


class ShapeMismatch(EnactError):
    code = "shape_mismatch"


class NonScalarLoss(EnactError):
    code = "non_scalar_loss"


class EmptySplit(EnactError):
    code = "empty_split"


class EmptyValidation(EnactError):
    code = "empty_validation"


class Empty(EnactError):
    code = "empty"


class CheckpointError(EnactError):
    code = "bad_checkpoint"


class ConfigError(EnactError):
    code = "bad_config"
