"""Graph Context Encoder: masked-graph reconstruction for molecules and graphs.

Submodules:

- ``tensor``: reverse-mode autodiff over numpy arrays
- ``graph``: feature codecs, graphs, batching, dataset files
- ``molecule``: SMILES, validity, canonical keys, descriptors
- ``model``: GINe convolutions, top-k pooling, encoder/decoder
- ``masking``: corruption pipeline and reconstruction loss
- ``training``: Adam, pretraining, checkpoints, transfer, classification
- ``generation``: n-shot generation and metrics
- ``cli``: the ``gce`` command
"""

__version__ = "0.1.0"
