"""Compare the compiled and pure-Python kernels.

    python benchmarks/bench_kernels.py [--repeat 5] [--keys 20000]

Prints the best-of-N time per kernel for each backend and the speedup.
Both backends are imported directly, so ``DLSM_PURE_PYTHON`` is ignored.
"""

import argparse
import random
import sys
import timeit

from dlsm import _kernels_py

try:
    from dlsm import _ckernels
except ImportError:
    _ckernels = None


def make_data(n_keys: int, seed: int = 0) -> dict:
    rng = random.Random(seed)
    keys = sorted({rng.randbytes(16) for _ in range(n_keys)})
    entries = [(k, i + 1, rng.randbytes(100) if i % 10 else None) for i, k in enumerate(keys)]
    runs = [sorted(entries[j::4], key=lambda e: (e[0], -e[1])) for j in range(4)]
    # a second version of every key so the merge has to drop something
    runs.append([(k, s + len(keys), v) for k, s, v in entries[::3]])
    block = entries[:40]
    return {"keys": keys, "entries": entries, "runs": runs, "block": block}


def cases(impl, data: dict) -> dict:
    keys = data["keys"]
    bits, nbits, nhash = impl.bloom_build(keys, 10)
    encoded = impl.encode_block(data["block"])
    probe = data["block"][len(data["block"]) // 2][0]
    return {
        "murmur3_32": lambda: [impl.murmur3_32(k, 0) for k in keys],
        "bloom_build": lambda: impl.bloom_build(keys, 10),
        "bloom_may_contain": lambda: [impl.bloom_may_contain(bits, nbits, nhash, k) for k in keys],
        "encode_block": lambda: impl.encode_block(data["block"]),
        "decode_block": lambda: impl.decode_block(encoded),
        "block_find": lambda: [impl.block_find(encoded, probe) for _ in range(1000)],
        "merge_entries": lambda: impl.merge_entries(data["runs"], True),
    }


def best_of(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--keys", type=int, default=20_000)
    args = p.parse_args(argv)
    data = make_data(args.keys)
    backends = {"python": _kernels_py}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled kernels not built; showing the pure-Python backend only", file=sys.stderr)
    results = {name: {k: best_of(fn, args.repeat) for k, fn in cases(impl, data).items()}
               for name, impl in backends.items()}
    print(f"{'kernel':<20}" + "".join(f"{b + ' ms':>12}" for b in backends) + f"{'speedup':>10}")
    for kernel in results["python"]:
        row = f"{kernel:<20}" + "".join(f"{results[b][kernel] * 1e3:>12.2f}" for b in backends)
        if "cython" in results:
            row += f"{results['python'][kernel] / results['cython'][kernel]:>9.1f}x"
        print(row)
    return 0


if __name__ == "__main__":
    sys.exit(main())
