"""Trading CTC loss against the masking penalty on one utterance.

Trains the micro model (about half a minute) unless a model file is given,
then attacks the same clip at several alpha values.

Run: python3 demos/alpha_sweep.py [model.bin]
"""
import sys

from patool import attack, corpus, ctc, metrics
from patool import psychoacoustic as pa
from patool.audio import snr_db

if len(sys.argv) > 1:
    model = ctc.load_model(sys.argv[1])
else:
    print("training the micro model ...")
    model = corpus.build_toy_model(seed=0).model

w, text = corpus.toy_corpus(20, seed=7)[3]
an = pa.analyze(w)
target = "open the door"
print(f"clean transcription: {ctc.transcribe(model, w)!r} (reference {text!r}), target {target!r}\n")

print(" alpha  success  iters  SNR dB  exceedance")
for alpha in (1.0, 0.8, 0.6, 0.4, 0.2):
    r = attack.run_attack(w, target, model, attack.AttackConfig(alpha=alpha), analysis=an)
    ex = metrics.masking_exceedance(w, r.delta, an)
    print(f"{alpha:6.1f}  {str(r.success):>7}  {r.iterations_used:5d}  {snr_db(w.samples, r.delta):6.2f}  {ex:10.4f}")

# lower alpha keeps more of the perturbation under the masking threshold,
# until the penalty wins and the target is no longer reached in budget
