"""High-precision reference implementations used only by the test suite.

Production code never imports this module. Everything here is deliberately
slow and dumb: power series summed with a 200-bit mantissa, adaptive
quadrature of KL integrands, and closed forms for the half-integer orders.
Frozen grids derived from these oracles live in tests/data/ and are
regenerated with:

    python tests/oracles.py --write-bessel-grid
    python tests/oracles.py --write-logbessel-grid

Run from the repository root; regeneration takes a few minutes because of the
arbitrary-precision sums (gmpy2 speeds mpmath up considerably if present).
"""

import argparse
import os

import mpmath as mp
import numpy as np

DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")

BESSEL_GRID_SEED = 20250417
BESSEL_GRID_POINTS = 100_000
BESSEL_GRID_FILE = os.path.join(DATA_DIR, "bessel_ratio_grid.npz")
LOG_BESSEL_FILE = os.path.join(DATA_DIR, "log_bessel_grid.npz")

_PREC_BITS = 200


def _series_sum(nu, z):
    """sum_k (z^2/4)^k / (k! (nu+1)_k) at the current mpmath precision.

    I_nu(z) = (z/2)^nu / Gamma(nu+1) * that sum; factoring the prefactor out
    keeps every term positive and O(exp(z)) so no cancellation occurs.
    """
    q = (z / 2) ** 2
    term = mp.mpf(1)
    total = mp.mpf(1)
    # terms grow until k (k + nu) exceeds q; force at least that many
    k_peak = int(mp.sqrt(q + nu * nu / 4) - nu / 2) + 2
    tiny = mp.mpf(2) ** (-_PREC_BITS - 20)
    k = 0
    while True:
        k += 1
        term *= q / (k * (nu + k))
        total += term
        if k > k_peak and term < total * tiny:
            break
    return total


def log_bessel_i(nu, z, prec_bits=_PREC_BITS):
    """log I_nu(z) from the defining power series, 200-bit mantissa."""
    with mp.workprec(prec_bits):
        nu = mp.mpf(nu)
        z = mp.mpf(z)
        s = _series_sum(nu, z)
        return nu * mp.log(z / 2) - mp.loggamma(nu + 1) + mp.log(s)


def bessel_ratio_ref(nu, z, prec_bits=_PREC_BITS):
    """I_nu(z)/I_{nu-1}(z) from two power-series sums sharing the prefactor."""
    with mp.workprec(prec_bits):
        nu = mp.mpf(nu)
        z = mp.mpf(z)
        s_hi = _series_sum(nu, z)
        s_lo = _series_sum(nu - 1, z)
        return (z / 2) / nu * s_hi / s_lo


def bessel_ratio_ref_float(nu, z):
    return float(bessel_ratio_ref(nu, z))


def log_vmf_normalizer_ref(d, kappa, prec_bits=_PREC_BITS):
    with mp.workprec(prec_bits):
        d = mp.mpf(d)
        kappa = mp.mpf(kappa)
        return float(
            (d / 2 - 1) * mp.log(kappa)
            - (d / 2) * mp.log(2 * mp.pi)
            - log_bessel_i(d / 2 - 1, kappa, prec_bits)
        )


def kl_vmf_ref(d, kappa_q, kappa_p, dot_mu, prec_bits=_PREC_BITS):
    """vMF KL with series-accurate ratio and normalizers."""
    ratio = float(bessel_ratio_ref(d / 2.0, kappa_q, prec_bits))
    return (
        (kappa_q - kappa_p * dot_mu) * ratio
        + log_vmf_normalizer_ref(d, kappa_q, prec_bits)
        - log_vmf_normalizer_ref(d, kappa_p, prec_bits)
    )


def mean_resultant_quad(d, kappa):
    """E[mu.x] under vMF via 1-d quadrature of the cosine marginal.

    Independent of the power series: integrates w exp(kappa w) (1-w^2)^{(d-3)/2}
    over [-1, 1]. Only usable for d >= 2 and moderate kappa.
    """
    with mp.workprec(120):
        kappa = mp.mpf(kappa)
        e = (mp.mpf(d) - 3) / 2

        def unnorm(w):
            return mp.e ** (kappa * w) * (1 - w * w) ** e

        z0 = mp.quad(unnorm, [-1, 1])
        z1 = mp.quad(lambda w: w * unnorm(w), [-1, 1])
        return float(z1 / z0)


def central_diff(f, x, h):
    return (f(x + h) - f(x - h)) / (2.0 * h)


def grad_check(f, grad, x, h, rtol, floor=1e-12):
    """Relative agreement between an analytic derivative and central differences."""
    fd = central_diff(f, x, h)
    g = grad(x)
    denom = max(abs(fd), abs(g), floor)
    return abs(fd - g) / denom <= rtol, fd, g


def make_bessel_grid(seed=BESSEL_GRID_SEED, n=BESSEL_GRID_POINTS):
    """The randomized (nu, z) cloud shared by tests and the frozen oracle file."""
    rng = np.random.default_rng(seed)
    nu = rng.uniform(0.5, 4096.0, size=n)
    # z in (0, 10 nu]: 1 - U is in (0, 1] almost surely; clamp the pathological 0
    frac = 1.0 - rng.random(size=n)
    frac = np.maximum(frac, 1e-12)
    z = 10.0 * nu * frac
    return nu, z


def bessel_ratio_fast(nu, z, prec_bits=_PREC_BITS):
    """Same power-series ratio on the raw gmpy2 backend, ~20x faster.

    Uses I_nu/I_{nu-1} = (z/2) S / (nu S + T) where S = sum_k t_k,
    T = sum_k k t_k, t_k = q^k / (k! (nu+1)_k), q = (z/2)^2: the order-(nu-1)
    series is t_k (nu+k)/nu term by term, so one pass yields both sums. The
    ratio is invariant to rescaling t, so summation starts at the peak index
    k* = (-nu + sqrt(nu^2 + 4q))/2 with t_{k*} := 1 and proceeds both ways
    until terms fall below 2^-215 of the running sum; all terms are positive
    (no cancellation) and the tails decay super-geometrically.
    _write_bessel_grid re-verifies a stratified subsample against the plain
    mpmath implementation before writing anything.
    """
    import gmpy2

    with gmpy2.context(precision=prec_bits + 15):
        zf = gmpy2.mpfr(z)
        nuf = gmpy2.mpfr(nu)
        q = zf * zf / 4
        k0 = max(int((-nu + (nu * nu + 4.0 * float(q)) ** 0.5) / 2), 0)
        one = gmpy2.mpfr(1)
        tiny = gmpy2.mpfr(2) ** (-prec_bits - 15)
        s = one
        t_sum = k0 * one
        # upward from the peak
        t = one
        k = k0
        while True:
            k += 1
            t = t * q / (k * (nuf + k))
            s += t
            t_sum += k * t
            if t < s * tiny:
                break
        # downward from the peak
        t = one
        for k in range(k0, 0, -1):
            t = t * (k * (nuf + k)) / q
            s += t
            t_sum += (k - 1) * t
            if t < s * tiny:
                break
        r = (zf / 2) * s / (nuf * s + t_sum)
        man, exp = r.as_mantissa_exp()
    with mp.workprec(prec_bits):
        return mp.mpf(int(man)) * mp.mpf(2) ** int(exp)


def _write_bessel_grid(path=BESSEL_GRID_FILE, n=BESSEL_GRID_POINTS):
    import time

    nu, z = make_bessel_grid(n=n)
    ref = np.empty(n)
    t0 = time.time()
    for i in range(n):
        ref[i] = float(bessel_ratio_fast(nu[i], z[i]))
        if i % 5000 == 0:
            print(f"  {i}/{n} ({time.time() - t0:.0f}s)", flush=True)
    # definitional check: the series and besseli must agree far below float64
    sub = np.linspace(0, n - 1, 400).astype(int)
    worst = mp.mpf(0)
    with mp.workprec(_PREC_BITS):
        for i in sub:
            a = bessel_ratio_ref(nu[i], z[i])
            b = bessel_ratio_fast(nu[i], z[i])
            worst = max(worst, abs(a - b) / a)
    assert worst < mp.mpf(2) ** -150, f"oracle routes disagree: {worst}"
    os.makedirs(os.path.dirname(path), exist_ok=True)
    np.savez_compressed(
        path, nu=nu, z=z, ratio=ref, seed=np.int64(BESSEL_GRID_SEED),
        crosscheck_rel=np.float64(worst),
    )
    print(f"wrote {path}: {n} points, route agreement {float(worst):.3e}")


def log_bessel_fast(nu, z, prec_bits=_PREC_BITS):
    """log I_nu(z) via the same peak-seeded gmpy2 series as bessel_ratio_fast.

    The absolute scale comes back through lgamma:
    log I = nu log(z/2) + k* log q - lgamma(k*+1) - lgamma(nu+k*+1) + log S_rel,
    S_rel = sum_k t_k / t_{k*}.
    """
    import gmpy2

    with gmpy2.context(precision=prec_bits + 15):
        zf = gmpy2.mpfr(z)
        nuf = gmpy2.mpfr(nu)
        q = zf * zf / 4
        k0 = max(int((-nu + (nu * nu + 4.0 * float(q)) ** 0.5) / 2), 0)
        one = gmpy2.mpfr(1)
        tiny = gmpy2.mpfr(2) ** (-prec_bits - 15)
        s = one
        t = one
        k = k0
        while True:
            k += 1
            t = t * q / (k * (nuf + k))
            s += t
            if t < s * tiny:
                break
        t = one
        for k in range(k0, 0, -1):
            t = t * (k * (nuf + k)) / q
            s += t
            if t < s * tiny:
                break
        # log I = nu log(z/2) - lgamma(nu+1) + log(t_true(k0)) + log(S_rel) and
        # t_true(k0) = q^k0 Gamma(nu+1) / (k0! Gamma(nu+k0+1)); lgamma(nu+1) cancels
        val = (
            nuf * gmpy2.log(zf / 2)
            + (k0 * gmpy2.log(q) if k0 else gmpy2.mpfr(0))
            - gmpy2.lgamma(gmpy2.mpfr(k0 + 1))[0]
            - gmpy2.lgamma(nuf + (k0 + 1))[0]
            + gmpy2.log(s)
        )
        man, exp = val.as_mantissa_exp()
    with mp.workprec(prec_bits):
        return mp.mpf(int(man)) * mp.mpf(2) ** int(exp)


def _write_logbessel_grid(path=LOG_BESSEL_FILE):
    nus = np.array(
        [0.0, 0.3, 0.5, 1.0, 1.5, 2.0, 3.7, 8.0, 16.0, 33.5, 64.0, 111.2,
         200.0, 392.0, 512.0, 1024.0, 2048.0, 4096.0]
    )
    zs = np.array(
        [1e-3, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0, 49.0, 51.0, 100.0, 300.0,
         700.0, 1500.0, 2048.0, 1e4, 1e5, 1e6]
    )
    nu_g, z_g = [a.ravel() for a in np.meshgrid(nus, zs)]
    vals = np.empty(nu_g.size)
    worst = 0.0
    for i, (a, b) in enumerate(zip(nu_g, z_g)):
        fast = log_bessel_fast(a, b)
        vals[i] = float(fast)
        # the direct mpmath series is affordable below z=300: cross-validate
        if b <= 300.0:
            ref = log_bessel_i(a, b)
            with mp.workprec(_PREC_BITS):
                worst = max(worst, float(abs(fast - ref) / abs(ref)))
    assert worst < 1e-45, f"log-Bessel oracle routes disagree: {worst}"
    os.makedirs(os.path.dirname(path), exist_ok=True)
    np.savez_compressed(path, nu=nu_g, z=z_g, logi=vals)
    print(f"wrote {path}: {vals.size} points, route agreement {worst:.3e}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--write-bessel-grid", action="store_true")
    ap.add_argument("--write-logbessel-grid", action="store_true")
    ap.add_argument("--points", type=int, default=BESSEL_GRID_POINTS)
    ns = ap.parse_args()
    if ns.write_bessel_grid:
        _write_bessel_grid(n=ns.points)
    if ns.write_logbessel_grid:
        _write_logbessel_grid()


if __name__ == "__main__":
    main()
