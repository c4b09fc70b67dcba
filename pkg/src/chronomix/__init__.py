"""Time-sliced language-model experts combined by a causally masked mixture.

Train one small decoder per time bin of a timestamped corpus, then answer a
query dated t_q by mixing the log-probabilities of every expert whose window
starts at or before t_q. Future experts get weight exactly zero, so knowledge
from after the query date cannot leak into the prediction.
"""

from .corpus import (
    ByteTokenizer,
    Document,
    ExternalVocabTokenizer,
    TimeWindow,
    assign_bin,
    default_windows,
    ingest,
    pack,
    read_shard,
    read_shards,
    write_shard,
)
from .errors import ChronomixError
from .evaluation import (
    EvalReport,
    MCItem,
    MCOption,
    evaluate,
    load_benchmark,
    perplexity,
    report_single_experts,
    save_benchmark,
    score_option,
)
from .lm import ExpertConfig, ForwardOutput, TimeExpert, load_expert, loss_and_grads, save_expert
from .mixture import (
    MixtureOutput,
    MixturePredictor,
    Router,
    SingleExpertPredictor,
    Strategy,
    compute_weights,
    mix,
    predict,
)
from .temporal import EligibilityMask, ExpertRegistry, containing_index, eligible_set
from .train import (
    OptimizerOpts,
    WSDSchedule,
    lr_at,
    mixture_nll,
    set_reference_mode,
    train_expert,
    train_stage2,
    wsd_for_total,
)

__version__ = "0.1.0"
