"""Exhaustive reference implementations (plain loops, no shared code with the package)."""
import math


def sweep_threshold(false_scores, targets_scores, target_rate):
    """Smallest threshold among all distinct scores (and +inf) whose false rate is within target."""
    candidates = sorted(set(false_scores) | set(targets_scores)) + [math.inf]
    n = len(false_scores)
    for t in candidates:
        if sum(1 for s in false_scores if s >= t) / n <= target_rate:
            return t
    return math.inf


def tar_at_far(genuine, imposter, far):
    t = sweep_threshold(list(imposter), list(genuine), far)
    return t, sum(1 for s in genuine if s >= t) / len(genuine)


def argmax_first(row):
    best, idx = -math.inf, -1
    for j, s in enumerate(row):
        if s > best:
            best, idx = s, j
    return idx, best


def open_set(known_rows, true_index, unknown_rows, target):
    known_best = [argmax_first(r) for r in known_rows]
    unknown_best = [argmax_first(r)[1] for r in unknown_rows]
    t = sweep_threshold(unknown_best, [b for _, b in known_best], target)
    hits = sum(1 for (j, b), y in zip(known_best, true_index) if j == y and b >= t)
    return t, hits / len(known_rows)


def cmc(known_rows, true_index, k):
    count = 0
    for row, y in zip(known_rows, true_index):
        rank = 1 + sum(1 for j, s in enumerate(row) if s > row[y] or (s == row[y] and j < y))
        count += rank <= k
    return count / len(known_rows)


def sweep_table(false_scores, target_scores):
    """Every distinct threshold (plus +inf) with counts of false/target scores at or above it.

    Walks the merged scores from high to low keeping running counts, so the
    whole table costs one sort.
    """
    merged = sorted([(s, 0) for s in false_scores] + [(s, 1) for s in target_scores], reverse=True)
    table = [(math.inf, 0, 0)]
    nf = nt = 0
    i = 0
    while i < len(merged):
        s = merged[i][0]
        while i < len(merged) and merged[i][0] == s:
            if merged[i][1]:
                nt += 1
            else:
                nf += 1
            i += 1
        table.append((s, nf, nt))
    return table


def pick(table, n_false, target_rate):
    """(threshold, false count, target count) at the smallest feasible threshold."""
    feasible = [row for row in table if row[1] / n_false <= target_rate]
    return min(feasible, key=lambda row: row[0])


def fast_tar_at_far(genuine, imposter, far):
    t, _, hits = pick(sweep_table(imposter, genuine), len(imposter), far)
    return t, hits / len(genuine)


def fast_open_set(known_rows, true_index, unknown_rows, target):
    known_best = [argmax_first(r) for r in known_rows]
    unknown_best = [argmax_first(r)[1] for r in unknown_rows]
    t, _, _ = pick(sweep_table(unknown_best, [b for _, b in known_best]), len(unknown_best), target)
    hits = sum(1 for (j, b), y in zip(known_best, true_index) if j == y and b >= t)
    return t, hits / len(known_rows)
