"""Multi-illuminant white balance by transformer fusion of camera WB presets.

A small numpy library: a minimal autodiff engine, the channel-attention
fusion network, CIEDE2000-based evaluation, convex-blend/hull analysis, and
a synthetic multi-illuminant scene simulator with training orchestration.
"""

__version__ = "0.1.0"

from .engine import Tensor, backward, gradient_check, no_grad
from .linear_fusion import (
    HullReport,
    analyze_hull,
    fit_pixel_weights,
    oracle_blend,
    project_to_simplex,
)
from .metrics import (
    LabColor,
    MetricsReport,
    aggregate,
    compute_report,
    delta_e_2000,
    image_delta_e,
    mae_angular,
    mse,
    srgb_to_lab,
)
from .model import (
    PRESET_NAMES,
    ModelConfig,
    ModelParams,
    PresetStack,
    forward,
    init_params,
    load_checkpoint,
    param_count,
    save_checkpoint,
    transposed_attention,
)
from .optim import AdamState, CosineSchedule, adam_step, cosine_lr
from .synth import (
    PRESET_CHROMA,
    SceneSpec,
    adjust_brightness,
    build_dataset,
    generate_scene,
    render_scene,
)
from .train import RunManifest, TrainConfig, evaluate_split, train
