"""Game-value sequences, the three tuple-set attacks, the nugget search
and the dispatching orchestrator."""

from .adversaries import (AttackConfigError, CI93Attack, DpAttack, MartAttack, SingAttack,
                          half_sample_event_freq)
from .gamevalue import (GameValueTable, XTrace, build_x, eval_x, exact_trajectories, jump_threshold,
                        quality_violation, sample_trajectories, trigger_g)
from .nugget import (NuggetResult, c_ell, check_nugget_structure, compute_k, nugget_finder, rho_grid,
                     verify_top_gap)
from .orchestrate import (AttackResult, TrialOutcome, coupling_mismatches, honest_reference, lemma_bound,
                          main_attack, run_attack_trials)

__all__ = [
    "AttackConfigError", "AttackResult", "CI93Attack", "DpAttack", "GameValueTable", "MartAttack",
    "NuggetResult", "SingAttack", "TrialOutcome", "XTrace", "build_x", "c_ell", "check_nugget_structure",
    "compute_k", "coupling_mismatches", "eval_x", "exact_trajectories", "half_sample_event_freq", "honest_reference", "jump_threshold",
    "lemma_bound", "main_attack", "nugget_finder", "quality_violation", "rho_grid", "run_attack_trials",
    "sample_trajectories", "trigger_g", "verify_top_gap",
]
