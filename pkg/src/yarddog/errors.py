"""Exception hierarchy shared by all yarddog modules."""


class YarddogError(Exception):
    """Base class; the CLI reports the concrete class name on failure."""


class ModelFormatError(YarddogError):
    pass


class ModelShapeError(YarddogError):
    def __init__(self, message: str, layer_index: int | None = None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class DatasetError(YarddogError):
    pass


class DimensionError(DatasetError):
    pass


class DuplicateKeyError(DatasetError):
    pass


class NonFiniteError(DatasetError):
    pass


class SplitError(YarddogError):
    pass


class DegenerateVectorError(YarddogError):
    pass


class ConvergenceError(YarddogError):
    pass


class EmptyGalleryError(YarddogError):
    pass


class ConfigError(YarddogError):
    pass
