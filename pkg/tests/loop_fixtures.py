"""Scripted executors for the retrieval loop with hand-computed scores."""

from taiji.algebra import ResultSet
from taiji.loop import RetrievalTask

TERMS = ("red", "oak", "chair", "set")
TASK = RetrievalTask("red oak chair set", TERMS, threshold=0.5)

# (terms present in the results, item score). With no vectors and no
# overflow, composite = 0.4 cov + 0.2 + 0.2 + 0.2 inf under default weights.
MONOTONE = [(1, 0.3), (2, 0.4), (3, 0.5), (4, 0.6)]
MONOTONE_COMPOSITES = [0.56, 0.68, 0.80, 0.92]


def rows(present: int, item_score: float, n: int = 3) -> ResultSet:
    text = " ".join(TERMS[:present])
    return ResultSet(("id", "text", "score"), tuple((f"r{i}", text, item_score) for i in range(n)))


class Scripted:
    """Returns the scripted result sets in order, repeating the last."""

    def __init__(self, script):
        self.script = list(script)
        self.calls: list[RetrievalTask] = []

    def __call__(self, task):
        step = self.script[min(len(self.calls), len(self.script) - 1)]
        self.calls.append(task)
        return rows(*step), ()


def monotone():
    return Scripted(MONOTONE)


def constant():
    return Scripted([(1, 0.3)])


def peaked():
    """Composite rises once, then falls: the argmax is the second set."""
    return Scripted([(1, 0.3), (2, 0.45), (1, 0.1), (1, 0.2)])
