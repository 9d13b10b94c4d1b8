"""Exception hierarchy shared across the package."""


class UVHandError(Exception):
    """Base class for all errors raised by this package."""


class MeshError(UVHandError):
    """Invalid mesh topology or geometry."""


class TemplateError(UVHandError):
    """Invalid UV template (overlapping charts, bad coordinates, ...)."""


class FormatError(UVHandError):
    """File could not be parsed or has an unexpected layout."""


class ShapeError(UVHandError):
    """Array arguments have incompatible shapes or counts."""


class FitError(UVHandError):
    """A numerical fit (ICP, Procrustes, ...) is degenerate or diverged."""
