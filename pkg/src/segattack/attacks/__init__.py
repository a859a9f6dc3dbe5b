from segattack.attacks.adaptive import (AdaptiveConfig, adaptive_attack, group_sparsity_penalty,
                                        select_top_patches)
from segattack.attacks.loss import attack_loss, attack_loss_terms
from segattack.attacks.pgd import (AttackConfig, AttackError, AttackResult, Perturbation,
                                   lp_norm, pgd_attack, project, save_result)
from segattack.attacks.universal import UniversalConfig, universal_attack

__all__ = ["AdaptiveConfig", "adaptive_attack", "group_sparsity_penalty", "select_top_patches",
           "attack_loss", "attack_loss_terms", "AttackConfig", "AttackError", "AttackResult",
           "Perturbation", "lp_norm", "pgd_attack", "project", "save_result",
           "UniversalConfig", "universal_attack"]
