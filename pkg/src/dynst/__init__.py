"""DynST: dynamic sparse training of per-sensor input masks for
spatio-temporal forecasting."""

from .autodiff import DiffTensor, backward, tensor_op
from .data import Dataset, gen_diffusion_grid, gen_planted_graph, split_811
from .mask import (SensorMask, apply_mask, binarize_prune, dst_drop,
                   dst_regrow, dst_step, init_mask, sparsity)
from .models import MessagePassingNet, NodeMlp, compact_forward, forward
from .morph import Graph, MorphedInput, STSeries, morph, patchify, unmorph
from .trainer import Schedule, alternate_round, dst_finetune, mse_loss, run, train_dense
from .evaluation import MetricsReport, SpeedReport, bench_speed, epsilon_check, metrics

__version__ = "0.1.0"
