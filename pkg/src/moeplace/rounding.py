import numpy as np


def largest_remainder(total: int, weights) -> np.ndarray:
    """Split ``total`` integer units proportionally to ``weights``.

    Floors each share, then hands the missing units to the largest
    fractional remainders; ties go to the lowest index. Integer weights are
    split with exact integer arithmetic.
    """
    w = np.asarray(weights)
    out = np.zeros(w.shape[0], dtype=np.int64)
    if total == 0 or w.size == 0:
        return out
    if total < 0:
        raise ValueError("total must be non-negative")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")

    if np.issubdtype(w.dtype, np.integer):
        wsum = int(w.sum())
        if wsum == 0:
            raise ValueError("cannot split over all-zero weights")
        scaled = [total * int(x) for x in w]
        floors = np.array([s // wsum for s in scaled], dtype=np.int64)
        rems = np.array([s % wsum for s in scaled], dtype=np.int64)
    else:
        wsum = float(w.sum())
        if wsum <= 0:
            raise ValueError("cannot split over all-zero weights")
        exact = total * (w.astype(np.float64) / wsum)
        floors = np.floor(exact).astype(np.int64)
        rems = exact - floors

    short = total - int(floors.sum())
    if short > 0:
        # stable sort on -remainder keeps lower indices first among ties
        order = np.argsort(-rems, kind="stable")
        floors[order[:short]] += 1
    elif short < 0:  # float drift only
        order = np.argsort(rems, kind="stable")
        take = order[floors[order] > 0][:-short]
        floors[take] -= 1
    return floors
