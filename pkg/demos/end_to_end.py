"""Owner deposits a model, a user queries it, and the enclave's cache state
decides the path each request takes.

    python3 demos/end_to_end.py
"""
import tempfile

import numpy as np

from secinfer.deployment import Deployment
from secinfer.models import Model
from secinfer.wire import Transcript


def main():
    rng = np.random.default_rng(0)
    transcript = Transcript()
    with tempfile.TemporaryDirectory() as root:
        dep = Deployment(seed=0, transcript=transcript, storage_root=root)
        enclave = dep.enclave(tcs_count=1)
        owner = dep.owner()
        alice, bob = dep.user(), dep.user()
        digits = Model.random("digits", 10, 16, rng)
        faces = Model.random("faces", 4, 16, rng)
        for m in (digits, faces):
            owner.deploy_model(m, dep.storage, [(enclave.measurement, u.uid) for u in (alice, bob)])
            for u in (alice, bob):
                u.add_request_key(m.model_id, enclave.measurement)

        print(f"enclave measurement {enclave.measurement.hex()[:16]}...")
        schedule = [(alice, "digits")] * 3 + [(bob, "digits"), (bob, "faces"), (bob, "faces")]
        for user, model_id in schedule:
            x = rng.standard_normal(16)
            req = user.build_request(model_id, x)
            path = enclave.ec_model_inf(req, 0)
            argmax, _ = user.open_result(req, enclave.ec_get_output(0))
            who = "alice" if user is alice else "bob"
            print(f"{who:5s} {model_id:6s} -> {path.value:4s} argmax={argmax}")

        print(f"handshakes={enclave.handshakes} provisioning={enclave.provisioning_calls} "
              f"model_loads={enclave.model_loads}")
        leaked = transcript.count(digits.to_bytes()[8:40])
        print(f"untrusted transcript: {len(transcript)} chunks, plaintext weight hits: {leaked}")


if __name__ == "__main__":
    main()
