"""Exception types shared across the package."""


class PromptPoseError(Exception):
    """Base class for all library errors."""


class ShapeError(PromptPoseError):
    """Operands have incompatible shapes."""


class DomainError(PromptPoseError):
    """Argument lies outside the mathematical domain of an operation."""


class InvalidInputError(PromptPoseError):
    """Input values are malformed (NaN coordinates, empty masks, ...)."""


class ContractError(PromptPoseError):
    """API misuse: double backward, missing gradients, bad call order."""


class ConfigError(PromptPoseError):
    """Configuration values violate a model or run constraint."""


class ParseError(PromptPoseError):
    """Annotation document violates the schema.

    ``json_path`` points at the offending element, e.g. ``annotations[2].bbox``.
    """

    def __init__(self, json_path, message):
        super().__init__(f"{json_path}: {message}")
        self.json_path = json_path


class IntegrityError(ParseError):
    """A record references a nonexistent annotation/image id."""


class CorruptDataError(PromptPoseError):
    """Stored data is internally inconsistent (e.g. RLE run-sum mismatch)."""


class GenerationError(PromptPoseError):
    """Synthetic scene layout could not be satisfied within the retry budget."""


class UndefinedSimilarityError(PromptPoseError):
    """Similarity is undefined (no visible keypoints); caller should skip."""
