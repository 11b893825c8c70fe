"""Fixed cell DAG: two input nodes, four intermediate nodes, concatenated output."""

NUM_INPUTS = 2
NUM_NODES = 4

# (source, target) with sources numbered 0..5 (inputs first) and targets 0..3.
EDGES: tuple[tuple[int, int], ...] = tuple(
    (src, dst) for dst in range(NUM_NODES) for src in range(NUM_INPUTS + dst)
)
NUM_EDGES = len(EDGES)


def incoming(node: int) -> list[int]:
    """Edge indices feeding intermediate ``node``."""
    return [e for e, (_, dst) in enumerate(EDGES) if dst == node]
