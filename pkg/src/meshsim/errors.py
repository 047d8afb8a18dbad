"""Exception hierarchy shared across the package."""


class MeshSimError(Exception):
    """Base class for all errors raised by this package."""


class MeshError(MeshSimError):
    """A mesh is structurally invalid (bad shapes, indices, orientation)."""


class SchemaError(MeshSimError):
    """A domain schema is unknown, malformed, or inconsistent with the data."""


class StateError(MeshSimError):
    """An operation was called in a state that does not permit it."""


class OutOfDomainError(MeshSimError):
    """A query point lies outside the mesh beyond tolerance."""

    def __init__(self, point, distance: float):
        self.point = tuple(float(c) for c in point)
        self.distance = float(distance)
        super().__init__(
            f"point {self.point} lies outside the mesh "
            f"(violation {self.distance:.3e} exceeds tolerance)"
        )


class FormatError(MeshSimError):
    """A file does not conform to the expected on-disk format."""


class ConfigError(MeshSimError):
    """A configuration value is missing, malformed, or out of range."""
