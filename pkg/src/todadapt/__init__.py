"""Domain specialization for task-oriented dialog encoders: salient-term
mining, in-domain corpus construction, specialization objectives (masked
language modeling and response selection), bottleneck adapters with stacking
and fusion, and downstream state-tracking / response-retrieval evaluation.
"""

__version__ = "0.1.0"

from .adapters import (
    AdapterBank,
    FusionWeights,
    adapter_trainable_count,
    freeze_base,
    init_adapter_bank,
    inject,
    load_adapter_bank,
    save_adapter_bank,
)
from .checkpoint import load_container, load_encoder, save_container, save_encoder
from .corpus import (
    CleaningReport,
    NCEGroup,
    RSInstance,
    SamplingReport,
    build_flat_corpus,
    build_nce_groups,
    build_thread_triples,
    clean_text,
    match_terms,
    sample_rs_instances,
)
from .data import (
    Dialog,
    DialogTriple,
    Ontology,
    SlotValue,
    Thread,
    ThreadComment,
    Utterance,
    convert_multiwoz,
    filter_single_domain,
    load_dialogs,
    load_thread_dump,
    load_triples,
    ontology_from_dialogs,
    save_dialogs,
    save_triples,
)
from .downstream import (
    DSTHead,
    EvalReport,
    ResponseRanker,
    StateTracker,
    TurnPrediction,
    cross_domain_matrix,
    dialogs_to_rr_pairs,
    dst_forward,
    few_shot_curve,
    finetune,
    joint_goal_accuracy,
    multi_domain_run,
    recall_at_1,
    rr_rank,
)
from .encoder import EncoderConfig, EncoderModel, encode_pair, mask_tokens, parameter_count
from .gradcheck import check_group, run_gradcheck
from .objectives import (
    EncoderSpecializer,
    MLMHead,
    ScoringHead,
    TrainSchedule,
    mlm_loss,
    rs_class_loss,
    rs_contrast_loss,
    specialize,
)
from .terms import DomainTermMiner, DomainTermSet, ScoredNgram, extract_terms
from .tokenization import Vocab, build_vocab, tokenize

__all__ = [
    "AdapterBank",
    "CleaningReport",
    "Dialog",
    "DialogTriple",
    "DomainTermMiner",
    "DomainTermSet",
    "DSTHead",
    "EncoderConfig",
    "EncoderModel",
    "EncoderSpecializer",
    "EvalReport",
    "FusionWeights",
    "MLMHead",
    "NCEGroup",
    "Ontology",
    "ResponseRanker",
    "RSInstance",
    "SamplingReport",
    "ScoredNgram",
    "ScoringHead",
    "SlotValue",
    "StateTracker",
    "Thread",
    "ThreadComment",
    "TrainSchedule",
    "TurnPrediction",
    "Utterance",
    "Vocab",
    "adapter_trainable_count",
    "build_flat_corpus",
    "build_nce_groups",
    "build_thread_triples",
    "build_vocab",
    "check_group",
    "clean_text",
    "convert_multiwoz",
    "cross_domain_matrix",
    "dialogs_to_rr_pairs",
    "dst_forward",
    "encode_pair",
    "extract_terms",
    "few_shot_curve",
    "filter_single_domain",
    "finetune",
    "freeze_base",
    "init_adapter_bank",
    "inject",
    "joint_goal_accuracy",
    "load_adapter_bank",
    "load_container",
    "load_dialogs",
    "load_encoder",
    "load_thread_dump",
    "load_triples",
    "mask_tokens",
    "match_terms",
    "mlm_loss",
    "multi_domain_run",
    "ontology_from_dialogs",
    "parameter_count",
    "recall_at_1",
    "rr_rank",
    "rs_class_loss",
    "rs_contrast_loss",
    "run_gradcheck",
    "sample_rs_instances",
    "save_adapter_bank",
    "save_container",
    "save_dialogs",
    "save_encoder",
    "save_triples",
    "specialize",
    "tokenize",
]
