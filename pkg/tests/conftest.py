import threading

import numpy as np
import pytest

from kexmpc.abb import AbbSession, RingConfig
from kexmpc.transport import InProcessNetwork


def run_peers(fn, n_args=None, timeout=120.0, ring=RingConfig(), seed=7):
    """Run `fn(session, peer_id, *extra)` on three peer threads.

    Returns the three results ordered by peer id; re-raises the first peer
    exception.
    """
    net = InProcessNetwork(timeout=timeout)
    endpoints = net.endpoints()
    results: list = [None, None, None]
    errors: list = []

    def work(peer):
        try:
            session = AbbSession(endpoints[peer], ring=ring, setup_seed=seed)
            extra = n_args[peer] if n_args is not None else ()
            results[peer] = fn(session, peer, *extra)
        except BaseException as exc:  # noqa: BLE001 - surface to main thread
            errors.append(exc)
            net.close()

    threads = [threading.Thread(target=work, args=(p,)) for p in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=timeout + 10)
    if errors:
        raise errors[0]
    return results


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
