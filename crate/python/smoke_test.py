"""Smoke test for the reflmap_py extension module.

Build it with `maturin develop -m crates/python/Cargo.toml`, or with
`cargo build --release -p reflmap-python --features extension-module` and
copy `target/release/libreflmap_py.so` to `reflmap_py.so` on the path.
"""

import math
import sys

import reflmap_py as rm


def main() -> int:
    u, b, s = rm.Point2(3.0, 4.0), rm.Point2(10.0, 10.0), rm.Point2(15.0, 2.0)
    m = rm.forward_path(u, b, s)
    est = rm.invert_measurement(m, u, b)
    assert est.distance(s) < 1e-9, est
    cov = rm.measurement_covariance(m, 1e-6, 1e-19, u, b)
    assert cov[0][1] == cov[1][0] and cov[0][0] > 0 and cov[1][1] > 0

    try:
        rm.Measurement(0.1, -1.0)
    except rm.ReflmapError:
        pass
    else:
        raise AssertionError("negative delay accepted")

    env = rm.Environment.rectangle(20.0, 20.0, 2)
    assert len(env.reflectors) == 8
    rmap = rm.build_map(env, seed=1)
    assert rmap.coverage(env.reflectors) >= 0.95, rmap.sheaf_area
    assert all(b <= a * (1 + 1e-9) for a, b in zip(rmap.diff_norms, rmap.diff_norms[1:]))

    user = rm.Point2(7.0, 12.0)
    meas = env.sample_measurements(user, 4, seed=2)
    p_hat, log_score = rm.localize(rmap, env, meas, seed=3)
    print(f"user {user} -> {p_hat}, error {p_hat.distance(user):.3f} m, log score {log_score:.2f}")

    bound = rm.ambiguity_lower_bound(40000.0, 15.9, 3)
    bits = rm.ra_upper_bound(40000.0, 15.9, 3)
    assert abs(math.log2(40000.0 / bound) - bits) < 1e-9
    print(f"bound {bound:.3f} m^2, radius {rm.circular_radius(bound):.3f} m, {bits:.2f} bits")
    print(f"reflmap_py {rm.__version__}: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
