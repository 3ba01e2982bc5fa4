"""Exception hierarchy shared by all modules."""


class GbpseError(Exception):
    """Base class for every error raised by this package."""


class InputError(GbpseError):
    """Malformed or inconsistent input data (files, models, measurement sets)."""


class UnknownEndpoint(InputError):
    pass


class EmptyMeasurementSet(InputError):
    pass


class MixedPairs(InputError):
    pass


class NumericalError(GbpseError):
    """Failure of a numerical procedure on otherwise valid input."""


class ResultNotPD(NumericalError):
    pass


class Unobservable(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class AllSingular(NumericalError):
    pass


class SingularInnovation(NumericalError):
    pass


class SingularBelief(NumericalError):
    pass


class NotConverged(NumericalError):
    pass


class PowerIterationStalled(NumericalError):
    pass


class NearSingular(NumericalError):
    pass
