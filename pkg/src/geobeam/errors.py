"""Exception hierarchy shared by all modules."""


class GeobeamError(Exception):
    """Base class for library errors."""


class DomainError(GeobeamError, ValueError):
    pass


class ConditioningError(GeobeamError, ArithmeticError):
    pass


class IntegrationError(GeobeamError, ArithmeticError):
    pass


class ConfigurationError(GeobeamError, ValueError):
    pass


class GeometryError(GeobeamError, ValueError):
    pass


class FrameError(GeobeamError, ValueError):
    pass


class UnsupportedGeometryError(GeobeamError, ValueError):
    pass


class ResolutionError(GeobeamError, ValueError):
    pass


class ShapeError(GeobeamError, ValueError):
    pass


class ParameterError(GeobeamError, ValueError):
    pass


class ContractError(GeobeamError, TypeError):
    pass


class MarginError(GeobeamError, ValueError):
    pass


class SamplingError(GeobeamError, ValueError):
    pass


class ConstructionError(GeobeamError, ArithmeticError):
    pass


class GluingError(GeobeamError, ValueError):
    pass


class GaugeError(GeobeamError, ValueError):
    pass


class ClosednessError(GeobeamError, ValueError):
    pass


class ChartError(GeobeamError, ValueError):
    pass


class UsageError(GeobeamError, ValueError):
    pass


class ConformalError(GeobeamError, ValueError):
    pass
