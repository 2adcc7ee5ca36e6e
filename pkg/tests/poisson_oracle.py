"""High precision Poisson reference, independent of the package."""

import mpmath

mpmath.mp.dps = 60


def pmf(mu, i):
    mu = mpmath.mpf(mu)
    return mpmath.exp(-mu + i * mpmath.log(mu) - mpmath.loggamma(i + 1)) if mu > 0 else mpmath.mpf(i == 0)


def minimal_R(mu, epsilon):
    """Smallest R with cumulative Poisson mass >= 1 - epsilon, by direct summation."""
    target = 1 - mpmath.mpf(epsilon)
    acc = mpmath.mpf(0)
    i = 0
    while True:
        acc += pmf(mu, i)
        if acc >= target:
            return i
        i += 1
