"""
Error hierarchy shared by every analysis module.
Each error carries a category and the process exit code the CLI returns for it.
"""


class AnalysisError(Exception):
    category = "data"
    exit_code = 3

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail

    def to_dict(self) -> dict:
        return {"category": self.category, "detail": self.detail}


class ConfigError(AnalysisError):
    category = "config"
    exit_code = 2


class DataError(AnalysisError):
    category = "data"
    exit_code = 3


class ModelOverflowError(DataError):
    """Linear predictor outside the representable range (|eta| > 700)"""


class ConvergenceError(AnalysisError):
    category = "convergence"
    exit_code = 4


class SamplingError(AnalysisError):
    category = "sampling"
    exit_code = 5
