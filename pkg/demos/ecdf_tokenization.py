"""Walk through the tokenization pipeline on a small synthetic corpus.

Raw lab values are mapped through each code's empirical CDF into [0, 1],
then laid out as either one token per code (continuous mode) or one token
per (code, decile) pair (decile mode).
"""

import numpy as np

from labmlm.corpus import build_bags, code_frequencies, generate_synthetic_corpus
from labmlm.ecdf import (
    build_continuous_vocab,
    build_decile_vocab,
    build_ecdf,
    ecdf_apply,
    ecdf_invert,
)

# a corpus of 200 patients over 6 lab codes with two latent factors
events, truth = generate_synthetic_corpus(200, 6, seed=1)
print(f"{len(events)} events, codes:",
      sorted({e.code_id for e in events}))

# fit one compressed eCDF per code from the observed values
by_code = {}
for e in events:
    if e.value is not None:
        by_code.setdefault(e.code_id, []).append(e.value)
ecdfs = {c: build_ecdf(c, np.asarray(v)) for c, v in sorted(by_code.items())}

e0 = ecdfs["C000"]
print(f"\nC000 observed {e0.n_train} values, {len(e0.values)} unique after compression")

# the transform is the fraction of training values at or below x;
# the inverse recovers a value at a requested quantile
for x in (-1.5, 0.0, 1.5):
    p = ecdf_apply(e0, x)
    print(f"  value {x:+.1f} -> p {p:.3f} -> decile {min(int(p * 10), 9)}")
print(f"  median is about {ecdf_invert(e0, 0.5):+.3f}")

# continuous mode: one token per code, the value rides along as a float
counts = code_frequencies(events)
vocab_c = build_continuous_vocab(counts)
print(f"\ncontinuous vocab: {vocab_c.vocab_size} tokens "
      f"(codes 1..{vocab_c.num_codes}, mask {vocab_c.mask_token}, "
      f"null {vocab_c.null_token})")

# decile mode: an 11-token block per code (deciles 0-9 plus a missing slot)
vocab_d = build_decile_vocab(ecdfs, counts)
lo, hi = vocab_d.decile_block("C000")
print(f"decile vocab: {vocab_d.vocab_size} tokens, C000 block {lo}..{hi}")

# the same events tokenize into bags under each vocabulary
bags_c, stats = build_bags(events, vocab_c, ecdfs)
bags_d, _ = build_bags(events, vocab_d, ecdfs)
print(f"\n{stats['bags_kept']} bags kept, {stats['bags_dropped_small']} dropped as too small")
b = bags_c[0]
print(f"first bag, continuous tokens: {b.tokens.tolist()}")
print(f"           values in [0,1]:   {np.round(b.values, 3).tolist()}")
print(f"first bag, decile tokens:     {bags_d[0].tokens.tolist()}")
