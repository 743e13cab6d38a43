"""Decode noisy per-frame scores with and without the O->B->I->E->O grammar.

Run: python3 demos/grammar_decoding.py
"""

import numpy as np

from airtime.dataset import air_time, is_valid_tags, tags_to_intervals, tags_to_string
from airtime.model import masked_transitions, viterbi_decode

rng = np.random.default_rng(0)
T, fps = 40, 30.0
truth = np.zeros(T, dtype=int)
truth[12], truth[13:22], truth[22] = 1, 2, 3  # one flight, nine frames in the air

scores = rng.normal(0.0, 1.0, size=(T, 4))
scores[np.arange(T), truth] += 1.6  # weak evidence for the right label

greedy = scores.argmax(axis=1)
decoded = viterbi_decode(scores, masked_transitions(np.zeros((6, 6)))).y

for name, tags in (("truth", truth), ("per-frame argmax", greedy), ("grammar Viterbi", decoded)):
    flights = tags_to_intervals(tags) if is_valid_tags(tags) else "ill-formed"
    print(f"{name:>17}: {tags_to_string(tags)}  flights={flights}")

print("air time (s):", [round(s, 4) for s in air_time(decoded, fps)])
