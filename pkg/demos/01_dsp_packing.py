"""Two int8 products from one wide multiply.

Run:  python3 demos/01_dsp_packing.py
"""
import numpy as np

from gemmflow.dsp_pack import estimate_array_dsps, exhaustive_mismatches, pack, packed_mac, unpack

# %% One packed operand carries both weights.
pp = pack(-7, 100)
print("packed operand:", pp.p, "->", unpack(pp))

# %% Multiplying it by an activation yields both products once the borrow is repaired.
for a in (3, -128, 127):
    print(f"a={a:5d}: packed_mac -> {packed_mac(pp, a)}   expected ({-7 * a}, {100 * a})")

# %% The sign trick holds for every int8 triple, so the check is exhaustive rather than sampled.
print("mismatches over all 2^24 triples:", exhaustive_mismatches())

# %% Packing halves the multiplier count of the array.
for dim in (16, 32):
    print(f"dim {dim}: {estimate_array_dsps(dim, False)} multipliers plain, "
          f"{estimate_array_dsps(dim, True)} packed")

# %% Random spot check with a vectorised form.
rng = np.random.default_rng(0)
w1, w2, a = rng.integers(-128, 128, (3, 5))
print("spot check:", all(packed_mac(pack(x, y), z) == (x * z, y * z) for x, y, z in zip(w1, w2, a)))
