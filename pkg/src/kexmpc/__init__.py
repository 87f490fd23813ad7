"""Privacy-preserving kidney exchange.

Three computing peers jointly run a greedy cycle-packing solver on a
secret-shared compatibility graph, so that no single peer ever sees the
patient-donor pairs' medical data.  The package also ships the plaintext
reference algorithms, a synthetic population generator, and a
discrete-event simulator of a dynamic exchange platform.
"""

__version__ = "0.1.0"
