"""Gradient-guided, structure-preserving token merging with spectral checks."""
from ._backend import BACKEND
from .cells import (Box, CellPartition, MergePlan, WindowLayout, box_from_mask, build_merge_plan,
                    cell_flatness, mergeable_cell_count, no_cell_plan, partition_cells,
                    prompt_aware_plan, select_destination, select_mergeable_cells)
from .cost import (AttentionWeights, LayerSchedule, LayerSpec, encoder_cost, energy_cost,
                   global_attention, merge_compute_unmerge_block, preset, windowed_attention)
from .errors import *  # noqa: F401,F403
from .field import (FeatureGrid, GradientField, central_diff_gradients, gradient_energy,
                    gradient_magnitude, pairwise_energy, sobel_gradients)
from .graph import TokenGraph, coarsen, cosine_affinity_graph, laplacians, lift
from .merging import MergedTokens, apply_merge, apply_unmerge, baseline_plan
from .spectral import (encoder_distortion, hoffman_wielandt_gap, laplacian_spectrum,
                       layer_discrepancy, merge_trace, row_drift, spectral_discrepancy,
                       verify_eigenvalue_inclusion)
from .synthesis import TrialConfig, merge_correctness, synth_window, theorem_trial

__version__ = "0.1.0"
