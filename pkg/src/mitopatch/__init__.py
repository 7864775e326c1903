"""Stain-aware, imbalance-aware patch classification toolkit.

Modules:

* ``stain``     - optical density, Macenko-style estimation, normalization
* ``augment``   - crops, dihedral moves, brightness/contrast, resize, tensors
* ``imbalance`` - hybrid WBCE/focal loss, class weights, sampler, split
* ``metrics``   - confusion metrics, ROC-AUC, per-domain reports
* ``nn``        - dense-connectivity CNN, forward and analytic backward
* ``train``     - AdamW, early stopping, training loop, checkpoints
* ``data``      - manifests, PNG IO, synthetic stained-patch generator
* ``config``    - the single run-config JSON document
* ``cli``       - command-line workflows
"""

__version__ = "0.1.0"
