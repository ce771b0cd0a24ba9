"""Where does the ear stop hearing? Absolute threshold vs masking threshold on one frame.

Run: python3 demos/masking_threshold.py [out.csv]
"""
import sys

import numpy as np

from patool import corpus
from patool import psychoacoustic as pa

# a 1.5 s synthetic utterance from the toy corpus
w, text = corpus.toy_corpus(1, seed=4, min_s=1.5, max_s=1.5)[0]
print(f"utterance: {text!r}, {w.samples.size} samples")

an = pa.analyze(w)
ath = pa.ath_bins(an.freqs_hz)

# every frame is normalized to the same peak level, so pick the one with the most maskers
n = int(np.argmax([len(m.all()) for m in an.maskers]))
m = an.maskers[n]
print(f"frame {n}: {len(m.tonal)} tonal and {len(m.nontonal)} non-tonal maskers after decimation")

lift = an.thresholds_db[n] - ath
print(f"masking raises the threshold above quiet by up to {lift.max():.1f} dB "
      f"(median {np.median(lift):.1f} dB)")
for f_hz in (250, 500, 1000, 2000, 4000):
    k = int(round(f_hz / (an.freqs_hz[1] - an.freqs_hz[0])))
    print(f"  {f_hz:5d} Hz  quiet {ath[k]:6.1f} dB  masked {an.thresholds_db[n, k]:6.1f} dB  "
          f"signal {an.levels_db_spl[n, k]:6.1f} dB")

if len(sys.argv) > 1:
    rows = np.column_stack([an.freqs_hz, ath, an.thresholds_db[n], an.levels_db_spl[n]])
    np.savetxt(sys.argv[1], rows, delimiter=",", fmt="%.4f", header="freq_hz,ath_db,threshold_db,psd_db_spl",
               comments="")
    print(f"wrote {sys.argv[1]}")
