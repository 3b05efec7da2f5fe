LORA_TARGETS = ("query", "key", "value", "proj")
NOISE_CASES = ("case1", "case2")
GRANULARITIES = ("micro", "macro")
SPLITS = ("train", "val", "test")


def is_odd_kernel(k: int) -> bool:
    return isinstance(k, int) and k >= 1 and k % 2 == 1


def is_valid_lora_target(target: str) -> bool:
    """Check if a LoRA target names one of the attention projections."""
    return target in LORA_TARGETS


def is_valid_noise_case(case: str) -> bool:
    return case in NOISE_CASES


def is_valid_granularity(granularity: str) -> bool:
    return granularity in GRANULARITIES


def is_valid_split(split: str) -> bool:
    return split in SPLITS


def parse_targets(targets: str | list | tuple) -> tuple:
    """Turn 'query,value' or ['query', 'value'] into an ordered tuple of targets."""
    if isinstance(targets, str):
        targets = [t.strip() for t in targets.split(",") if t.strip()]
    return tuple(t for t in LORA_TARGETS if t in set(targets))
