"""Exception types. Each carries a short category used for CLI exit codes."""


class PruneTreeError(Exception):
    category = "error"
    exit_code = 1


class StructuralError(PruneTreeError, ValueError):
    """Shapes or channel counts that cannot form a valid network."""

    category = "structural"
    exit_code = 3


class ValidationError(PruneTreeError, ValueError):
    category = "validation"
    exit_code = 4


class PreconditionError(PruneTreeError, ValueError):
    category = "precondition"
    exit_code = 4


class DegenerateRepresentation(PruneTreeError, ArithmeticError):
    """A representation whose self-HSIC vanishes (all rows equal)."""

    category = "degenerate"
    exit_code = 5


class TrainingDiverged(PruneTreeError, ArithmeticError):
    category = "diverged"
    exit_code = 6

    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss during epoch {epoch}")
        self.epoch = epoch


class IngestionError(PruneTreeError, OSError):
    category = "ingestion"
    exit_code = 2


class CheckpointError(PruneTreeError, ValueError):
    category = "checkpoint"
    exit_code = 2


class PruningComplete(PruneTreeError):
    """Neither a layer nor a filter candidate can be generated any more."""

    category = "complete"
    exit_code = 0
