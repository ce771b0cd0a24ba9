"""Does the attack survive a room? Plain vs room-averaged optimization.

Attacks are optimized on a 10-room bank (4 rooms per step) and then played
through 5 rooms the optimizer never saw.

Run: python3 demos/room_robustness.py [model.bin]
"""
import sys

import numpy as np

from patool import attack, corpus, ctc, metrics, room
from patool import psychoacoustic as pa

model = ctc.load_model(sys.argv[1]) if len(sys.argv) > 1 else corpus.build_toy_model(seed=0).model
target = "open the door"
train = room.sample_room_bank(11, seed=1)  # last one is the check room
held_out = room.sample_room_bank(5, seed=2)
# rooms attenuate by roughly 30 dB, so the budget is larger than for digital attacks
eps = 16000.0

w, _ = corpus.toy_corpus(20, seed=7)[0]
an = pa.analyze(w)
plain = attack.run_attack(w, target, model, attack.AttackConfig(epsilon=eps), analysis=an)
cfg = attack.AttackConfig(epsilon=eps, eot=attack.EotConfig(10, 4, True))
robust = attack.run_attack_eot(w, target, model, cfg, attack.RoomSampler(train[:10], 4, train[10]), analysis=an)
print(f"plain: success {plain.success} after {plain.iterations_used} iterations")
print(f"EOT:   success {robust.success} (check room) after {robust.iterations_used} iterations\n")

for name, r in (("plain", plain), ("EOT", robust)):
    heard = [ctc.transcribe(model, room.apply_room(w.samples + r.delta, h, True)) for h in held_out]
    cers = [metrics.cer(target, s) for s in heard]
    print(f"{name:5s} mean CER {np.mean(cers):.2f}  " + "  ".join(repr(s) for s in heard))
