"""Architecture-level backdoor whose trigger is a pixel-parity code.

The attack grafts a quantize-and-count branch between the raw input and the
avgpool/FC junction of a trained CNN. This package implements the trigger, the
graft, the std-recovery extension, stealth metrics, defense surrogates, the
file formats, and a CLI that runs each experiment into a JSON report.
"""

__version__ = "0.1.0"

from .pixelmath import (
    SCALE,
    ParityProfile,
    PixelImage,
    SampleTensor,
    TriggerReport,
    inject_trigger,
    make_even,
    make_even_array,
    parity_census,
    parity_profile,
    quantize_parity_exact,
)
from .backdoor import (
    DetectorActivation,
    DetectorConfig,
    batch_activations,
    clean_logit_bound,
    data_processing,
    detect,
    even_indicator,
    fc_row_sums,
    graft_forward,
    hijack_class,
    trigger_detector,
)
from .model import (
    EpochStats,
    EvalResult,
    ModelSpec,
    PoisonSpec,
    TrainConfig,
    TrainingDivergedError,
    WeightsBundle,
    badnets_control,
    evaluate,
    forward,
    forward_pooled,
    gradient_check,
    init_weights,
    train,
)
from .stdsearch import (
    StdCandidates,
    StdSelection,
    get_std_candidates,
    is_candidate,
    search_std,
    select_std,
)
from .stealth_metrics import QualityScore, psnr, quality, ssim
from .defense_sims import (
    DefenseReport,
    ScaleUpResult,
    StripScores,
    cohort_auc,
    scaleup_cohort,
    scaleup_spc,
    strip_cohort,
    strip_entropy,
)
from .datasets import (
    FormatError,
    LabeledDataset,
    cifar_record,
    load_cifar10,
    load_cifar10_dir,
    load_cifar10_file,
    read_ppm,
    read_tensor,
    read_weights,
    synth_dataset,
    write_ppm,
    write_tensor,
    write_weights,
)
