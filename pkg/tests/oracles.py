"""Independent reference computations used to check the library.

Nothing here imports delibchain's consensus code. Agreement is hand-counted
with plain integers and thresholds compare by cross-multiplication, so the
results share no arithmetic path with the Fraction-based implementation.
"""


def hand_count(policy, policy_lists):
    count = 0
    for policies in policy_lists:
        for p in policies:
            if p == policy:
                count += 1
                break
    return count, len(policy_lists)


def hand_accepted(policy_lists, theta_num, theta_den):
    """Accepted policies as (policy, count, n), ordered by count desc then name."""
    n = len(policy_lists)
    universe = []
    for policies in policy_lists:
        for p in policies:
            if p not in universe:
                universe.append(p)
    out = []
    for p in universe:
        count, _ = hand_count(p, policy_lists)
        if count * theta_den >= theta_num * n:
            out.append((p, count, n))
    out.sort(key=lambda t: (-t[1], t[0]))
    return out


def hand_confidence(policy_lists, theta_num, theta_den):
    """Confidence as an unreduced (numerator, denominator) pair; (0, 1) when nothing is accepted."""
    acc = hand_accepted(policy_lists, theta_num, theta_den)
    if not acc:
        return 0, 1
    n = len(policy_lists)
    return sum(c for _, c, _ in acc), n * len(acc)


def brute_unanimous(values, abstain):
    """True iff every entry is the same non-abstaining value, by pairwise comparison."""
    for v in values:
        if v is abstain:
            return False
    for i in range(len(values)):
        for j in range(len(values)):
            if values[i] != values[j]:
                return False
    return len(values) > 0


def least_squares(xs, ys):
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    slope = sxy / sxx
    return slope, my - slope * mx
