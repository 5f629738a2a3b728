class GaussianMappingError(Exception):
    """Base class for every error raised by the mapping pipeline."""


class ShapeMismatchError(GaussianMappingError, ValueError):
    def __init__(self, what, expected, got):
        super().__init__(f"{what}: shape mismatch, expected {tuple(expected)} got {tuple(got)}")
        self.expected = tuple(expected)
        self.got = tuple(got)


class SceneModelError(GaussianMappingError, ValueError):
    pass


class RenderError(GaussianMappingError):
    pass


class TrainingError(GaussianMappingError):
    pass


class NonFiniteGradientError(TrainingError):
    def __init__(self, index, group):
        super().__init__(f"non-finite gradient for Gaussian {index} in parameter group '{group}'")
        self.index = int(index)
        self.group = group


class MiningError(GaussianMappingError):
    pass


class DatasetError(GaussianMappingError):
    def __init__(self, message, path=None):
        text = f"{message} ({path})" if path is not None else message
        super().__init__(text)
        self.path = path


class PlyFormatError(DatasetError):
    def __init__(self, message, prop=None, path=None):
        if prop is not None:
            message = f"{message}: '{prop}'"
        super().__init__(message, path)
        self.prop = prop


class ConfigError(GaussianMappingError, ValueError):
    pass


class PipelineError(GaussianMappingError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class MetricError(GaussianMappingError, ValueError):
    pass


class PcaError(GaussianMappingError, ValueError):
    pass
