"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--scale 1]

Each kernel is run once untimed (JIT compile / cache load), checked for
agreement with the numpy result, then timed with timeit. With
CDFACE_DISABLE_NUMBA=1 only the numpy column is reported.
"""

import argparse
import timeit

import numpy as np

from cdface import _kernels


def cases(scale: int, rng: np.random.Generator):
    # sizes follow metric use: S samples x T*3V flattened frames, T x V x 3 meshes,
    # and latent rows against a codebook
    s, t, v, k, d = 6, 60 * scale, 400 * scale, 256, 64
    yield "pairwise_distances", (rng.normal(size=(s, t * 3 * v // 10)),)
    yield "vertex_errors", (rng.normal(size=(t, v, 3)), rng.normal(size=(t, v, 3)))
    yield "nearest_rows", (rng.normal(size=(t * 4, d)), rng.normal(size=(k, d)))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20, help="timed calls per kernel (default: 20)")
    ap.add_argument("--scale", type=int, default=1, help="problem size multiplier (default: 1)")
    ap.add_argument("--seed", type=int, default=0, help="input RNG seed (default: 0)")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    print(f"backend: {_kernels.BACKEND}")
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, inputs in cases(args.scale, rng):
        ref_fn = _kernels.NUMPY_KERNELS[name]
        ref = ref_fn(*inputs)
        t_np = timeit.timeit(lambda: ref_fn(*inputs), number=args.repeat) / args.repeat * 1e3
        if _kernels.HAVE_NUMBA:
            fast = _kernels.ACTIVE_KERNELS[name]
            got = fast(*inputs)  # compile outside the timed region
            if not np.allclose(got, ref, rtol=1e-10, atol=1e-12):
                raise SystemExit(f"{name}: numba and numpy results disagree")
            t_nb = timeit.timeit(lambda: fast(*inputs), number=args.repeat) / args.repeat * 1e3
            print(f"{name:<20} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.2f}x")
        else:
            print(f"{name:<20} {t_np:>10.3f} {'-':>10} {'-':>8}")


if __name__ == "__main__":
    main()
