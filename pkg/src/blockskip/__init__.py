"""Learn, rectify, and execute per-timestep block-skipping masks for
iterative denoisers, at a scale that fits on a desk."""

from .diffusion import (NoiseSchedule, SamplerError, ScheduleError, TrajectoryRecord,
                        forward_diffuse, make_schedule, predict_initial, reverse_step,
                        sample_chain)
from .executor import (CacheError, ExecutionStats, FeatureCache, MaskError, MaskMatrix,
                       all_ones_mask, run_masked_chain, run_masked_step_binary,
                       run_masked_step_continuous)
from .model import (BlockChainModel, ModelError, ModelSpec, load_container,
                    model_forward, save_container)
from .rectifier import RectificationReport, liveness_oracle, rectify, verify_equivalence
from .tensor import Tensor, backward
from .trainer import (LossBreakdown, MaskTrainingError, TimestepWeights, TrainerConfig,
                      binarize, bimodal_loss, feature_loss, optimize_timestep,
                      piecewise_weights, relative_feature_change, sparse_loss,
                      teacher_trajectory, total_loss, train_mask)

__version__ = "0.1.0"
