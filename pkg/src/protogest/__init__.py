"""Two-stream micro-gesture classification workbench.

Modules:
    tensorio  - binary tensor codec, dataset manifests, prediction files
    synthgen  - deterministic synthetic clip generator
    net       - two-pathway encoder, heads, probability fusion, checkpoints
    xfuse     - channel cross-attention fusion between the pathways
    protoref  - prototype bank and refinement loss
    trainer   - optimization loop, evaluation, ensembling
    gradcheck - finite-difference verification suites
    report    - plots and markdown summaries
    cli       - command-line entry point (`protogest`)
"""

__version__ = "0.1.0"
