from .evasion import (
    ITA_KINDS,
    AdversarialPatch,
    ItaConfig,
    adversarial_patch,
    fgsm,
    generate,
    jsma,
    pgd,
    project,
    square_attack,
    spatial_transform,
    transform_images,
)
from .poisoning import (
    ATTACK_KINDS,
    AttackConfigError,
    AttackScenario,
    TriggerSpec,
    apply_tlf,
    apply_ulf,
    backdoor_eval_set,
    build_hooks,
    csf,
    merge_hooks,
    pick_servers,
    ssf,
)
