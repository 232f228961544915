"""Exception hierarchy shared by every module."""


class ApiEvadeError(Exception):
    pass


class ConfigError(ApiEvadeError, ValueError):
    pass


class VocabularyError(ApiEvadeError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "vocabulary error"


class CorpusParseError(ApiEvadeError, ValueError):
    """Malformed corpus/program/patch file; message carries file line context."""


class TrainingError(ApiEvadeError):
    pass


class ModelLoadError(ApiEvadeError):
    pass


class AttackStateError(ApiEvadeError):
    pass


class PreconditionError(ApiEvadeError):
    pass


class NothingToAttackError(ApiEvadeError):
    pass


class SynthesisError(ApiEvadeError):
    pass


class VerdictError(ApiEvadeError):
    pass


class EmptyDetectedSetError(ApiEvadeError):
    pass
