"""Compare the compiled and pure-Python loss/shaping kernels.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints the best-of-N wall time per kernel and backend, the speedup, and
whether the two backends produced identical results.
"""

import argparse
import timeit

from flcommbench import kernels

CASES = {
    # 10 MiB reliable stream at 10% loss on a 60 Mbit/s link
    "stream_segments 10MiB p=0.1": (
        "stream_segments",
        (10 << 20, 1448, 0.1, 12345, 7.5e6, 65536.0, 0.0, 0.0, 0.0, 0.2, 2.0, 3.0)),
    # 100k datagram drop decisions
    "drop_mask 100k p=0.05": ("drop_mask", (12345, 100_000, 0.05)),
}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)

    try:
        compiled = kernels.backend("cython")
    except ImportError:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    pure = kernels.backend("python")
    print(f"{'kernel':<30} {'python (s)':>12} {'cython (s)':>12} {'speedup':>9}  identical")
    for label, (name, call_args) in CASES.items():
        fp, fc = getattr(pure, name), getattr(compiled, name)
        tp = min(timeit.repeat(lambda: fp(*call_args), number=1, repeat=args.repeat))
        tc = min(timeit.repeat(lambda: fc(*call_args), number=1, repeat=args.repeat))
        same = fp(*call_args) == fc(*call_args)
        print(f"{label:<30} {tp:>12.4f} {tc:>12.5f} {tp / tc:>8.1f}x  {same}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
