"""tetherlm: keep a high-utility model's generations within a provable
divergence budget of a trusted reference model.

The library fuses two autoregressive models step by step under a
sequence-level budget, at token or byte granularity, and ships the
baselines and copying metrics needed to measure the risk-utility
trade-off on desk-scale n-gram models.
"""

from .budget import (
    BudgetState,
    BudgetViolationError,
    PrefixDebtReport,
    accrue,
    average_debt,
    bank,
    prefix_debt,
)
from .bpe import Tokenizer, train_bpe
from .bytelevel import (
    ByteDistribution,
    ByteState,
    advance,
    byte_anchored_decode,
    byte_state_init,
    enumerate_byte_oracle,
    next_byte_dist,
)
from .decode import AnchorConfig, DecodeTrace, anchored_decode, renyi_decode
from .fusion import ClipResult, FusionResult, clip_renyi, geometric_mix, kl, project_kl, renyi_inf
from .lm import (
    EOS,
    Alphabet,
    DecodeParams,
    Distribution,
    NgramModel,
    apply_processors,
    next_dist,
    sample,
    sequence_logprob,
    train_ngram,
)
from .metrics import CopyingReport, MetricsConfig, acs, lcs, minhash, ncr, normalize, rouge_f1, utility_proxy

__version__ = "0.1.0"

__all__ = [
    "Alphabet", "AnchorConfig", "BudgetState", "BudgetViolationError",
    "ByteDistribution", "ByteState", "ClipResult", "CopyingReport",
    "DecodeParams", "DecodeTrace", "Distribution", "EOS", "FusionResult",
    "MetricsConfig", "NgramModel", "PrefixDebtReport", "Tokenizer",
    "accrue", "acs", "advance", "anchored_decode", "apply_processors",
    "average_debt", "bank", "byte_anchored_decode", "byte_state_init",
    "clip_renyi", "enumerate_byte_oracle", "geometric_mix", "kl", "lcs",
    "minhash", "ncr", "next_byte_dist", "next_dist", "normalize",
    "prefix_debt", "project_kl", "renyi_decode", "renyi_inf", "rouge_f1",
    "sample", "sequence_logprob", "train_bpe", "train_ngram", "utility_proxy",
]
