"""Two-branch LSTM traffic-flow forecasting with a from-scratch autodiff core."""
from .core import NonFiniteError, ShapeError, Tape, TapeError, Tensor
from .data import (DataError, RawSeries, SeriesPair, SynthParams, WindowedDataset,
                   make_windows, prepare_series, split_chronological, synth_generate)
from .evaluation import EvalReport, evaluate, mape, rmse
from .models import Model, ModelConfig, ModelVariant, build, load_model, predict, save_model
from .training import TrainConfig, TrainHistory, TrainingError, grid_search, train

__version__ = "0.1.0"
