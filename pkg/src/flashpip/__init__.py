"""Iteration pruning and structured-sparse fused execution for recurrent
stereo refinement, with a modeled global-memory access ledger."""

__version__ = "0.1.0"

from .tensor import Adam, GradTape, SGD, Tensor
from .model import (ConvGruParams, CorrVolume, ModelConfig, RefineModel,
                    TrajectoryRecord, build_corr, corr_lookup, disparity_head,
                    epe, gru_step, init_disparity, run_trajectory)
from .pip import (PipLossReport, PruneSchedule, block_aggregate, loss_cum,
                  loss_final, loss_hid, pip_losses, prune_progressive, prune_stage)
from .sparsity import (ImportanceMap, Rulebook, SparsityMask, build_rulebook,
                       coarsen_mask, importance_proxy, make_masks, select_active)
from .engine import (AccessLedger, dense_reference_loop, fused_sparse_loop,
                     ledger_report, masked_dense_loop, pack, run_fused,
                     scatter, sparse_ledger)
from .trace import (UpdateFlagMap, hit_ratio, iou_updated, trajectory_report,
                    update_flags, updated_fraction)
from .dataio import (StereoSample, generate_scene, load_checkpoint, make_dataset,
                     pfm_read, pfm_write, save_checkpoint)
from .training import evaluate_epe, train_baseline
