"""Error types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes or dimensions are incompatible."""


class MaskError(ValueError):
    """An attention mask row has no active entry."""


class ModeError(RuntimeError):
    """An operation was invoked in the wrong train/inference mode."""


class LifecycleError(RuntimeError):
    """A component was used before it was initialized."""


class IndexCorruptionError(ValueError):
    """Quantized indices reference entries outside the codebook."""


class PlanError(ValueError):
    """A shard plan is inconsistent with the tokens it should cover."""


class ProtocolError(RuntimeError):
    """A device broke the lockstep exchange schedule."""


class ConfigError(ValueError):
    """An experiment config failed schema validation."""
