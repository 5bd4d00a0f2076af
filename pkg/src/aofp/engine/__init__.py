from .run import GLOBAL, PER_LAYER, AofpConfig, AofpResult, MoveRecord, aofp_run, finetune_config
from .search import (
    FINISHED,
    SEARCHING,
    Decision,
    LayerPruningState,
    MissingSamples,
    estimate_importance,
    isolated_damage,
    refine_step,
    sample_ablation,
    scored_output,
    scoring_pass,
    successor_chain,
)
