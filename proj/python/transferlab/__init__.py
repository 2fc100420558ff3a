"""Black-box transferability experiments on small embedding models."""

from ._core import (
    Model,
    TransferlabError,
    assemble_gradients,
    attack,
    augment,
    cosine,
    cosine_gradient,
    cw_objective_f,
    f_star_a,
    finetune_nll,
    fit_beta,
    gen_synthetic,
    l_soft,
    l_tri,
    measure_nll_curve,
    normal_cdf,
    predict_transferability,
    run_stage,
    softmax,
)

__all__ = [
    "Model",
    "TransferlabError",
    "assemble_gradients",
    "attack",
    "augment",
    "cosine",
    "cosine_gradient",
    "cw_objective_f",
    "f_star_a",
    "finetune_nll",
    "fit_beta",
    "gen_synthetic",
    "l_soft",
    "l_tri",
    "measure_nll_curve",
    "normal_cdf",
    "predict_transferability",
    "run_stage",
    "softmax",
]
