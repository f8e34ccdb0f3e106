from enum import Enum


class LossKind(Enum):
    """
    Enumeration of the training objectives.
    The first three are label-free distillation losses, AAM needs speaker labels.
    """
    MSE = "mse"
    COS = "cos"
    CONTRASTIVE = "contrastive"
    AAM = "aam"

    @staticmethod
    def names():
        return [kind.value for kind in LossKind]

    @staticmethod
    def parse(name):
        """
        Convert a loss name to its enum value.

        Args:
            name (str | LossKind): The loss name, e.g. "contrastive".

        Returns:
            LossKind: the parsed kind.

        Raises:
            ValueError: If the name is not a known loss.
        """
        if isinstance(name, LossKind):
            return name
        try:
            return LossKind(str(name).strip().lower())
        except ValueError:
            raise ValueError(f"Unknown loss {name!r}; expected one of {', '.join(LossKind.names())}")

    @property
    def is_distillation(self):
        return self in {LossKind.MSE, LossKind.COS, LossKind.CONTRASTIVE}


class PoolingMode(Enum):
    """
    Utterance-level pooling of the student net.
    """
    STATS = "stats"  # mean and standard deviation, x-vector style
    GAP = "gap"      # channel-wise global average


class TrialLabel(Enum):
    TARGET = 1
    NONTARGET = 0
