"""slimgan: compress GAN generators by differentiable architecture search.

Given a frozen pretrained generator, the package searches a sequential
supernet for operators and channel widths under a FLOPs budget, guided purely
by distillation from the original generator (no discriminator involved), then
retrains the derived compact generator from scratch and optionally quantizes
it to 8-bit.
"""

from .budget import (
    BudgetConfig,
    FlopsReport,
    LambdaController,
    budget_term,
    derived_flops,
    expected_flops_alpha,
    expected_flops_gamma,
    op_flops,
)
from .distill import (
    DistillConfig,
    FeaturePyramid,
    content_loss,
    distance,
    perceptual_loss,
    tv_loss,
)
from .engine import (
    DatasetSplit,
    PhaseError,
    SearchState,
    derive,
    pretrain_step,
    run,
    search_step,
    split_dataset,
    train_from_scratch,
)
from .metrics import psnr
from .quantize import (
    QuantizedTensor,
    quantize_model,
    quantize_tensor,
    simulate_quantized_forward,
)
from .schema import export_architecture, import_architecture
from .search_space import (
    EXPANSION_RATIOS,
    ArchLayer,
    Architecture,
    LayerSpec,
    OperatorKind,
    SupernetSpec,
    build_sr_supernet,
    build_translation_supernet,
    candidate_widths,
)
from .supernet import ArchParams, GeneratorSupernet, SuperConv2d, sample_width
from .toy import make_toy_task

__version__ = "0.1.0"
