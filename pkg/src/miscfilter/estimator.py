"""Scikit-learn style wrapper around model construction and training."""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import model as mdl
from . import train as trn
from .metrics import psnr
from .utils.validation import check_images, check_pair, to_channel_first, to_sample_first


class MISCDeblurrer(RegressorMixin, BaseEstimator):
    """Blind motion deblurring network trained by :meth:`fit`.

    Images are ``N x 3 x H x W`` float arrays in ``[0, 1]``; ``H`` and ``W``
    must be divisible by ``2 ** depth``.  :meth:`score` returns mean PSNR in
    dB rather than the coefficient of determination.

    Parameters
    ----------
    strategy, order : str
        Coupling of the motion and residual networks, e.g. ``"shared"`` and
        ``"filter_first"``.
    base_channels, depth, kernel_size, head_kernel, max_flow :
        Architecture, see :class:`miscfilter.model.NetworkConfig`.
    use_mga, use_kernel, use_weight, use_offset : bool
        Filter component switches.
    steps, batch, lr_start, lr_end : training schedule.
    random_state : int
        Seeds initialization and batch sampling.

    Attributes
    ----------
    state_ : ModelState
        Trained parameters.
    log_ : list of dict
        Training records (step, lr, loss).
    """

    def __init__(self, strategy="shared", order="filter_first", base_channels=16, depth=2,
                 kernel_size=7, head_kernel=1, max_flow=16.0, use_mga=True, use_kernel=True,
                 use_weight=True, use_offset=True, steps=1000, batch=8, lr_start=1e-3,
                 lr_end=1e-6, random_state=0):
        self.strategy = strategy
        self.order = order
        self.base_channels = base_channels
        self.depth = depth
        self.kernel_size = kernel_size
        self.head_kernel = head_kernel
        self.max_flow = max_flow
        self.use_mga = use_mga
        self.use_kernel = use_kernel
        self.use_weight = use_weight
        self.use_offset = use_offset
        self.steps = steps
        self.batch = batch
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.random_state = random_state

    def _configs(self):
        net = mdl.NetworkConfig(
            base_channels=self.base_channels, depth=self.depth, kernel_size=self.kernel_size,
            max_flow=float(self.max_flow), head_kernel=self.head_kernel, use_mga=self.use_mga,
            use_kernel=self.use_kernel, use_weight=self.use_weight, use_offset=self.use_offset,
        ).validate()
        coupling = mdl.CouplingConfig(self.strategy, self.order)
        cfg = trn.TrainConfig(steps=self.steps, batch=self.batch, lr_start=self.lr_start,
                              lr_end=self.lr_end, seed=self.random_state).validate()
        return net, coupling, cfg

    def fit(self, X, y):
        """Train on blurred ``X`` and sharp targets ``y``."""
        net, coupling, cfg = self._configs()
        X, y = check_pair(X, y, multiple=2 ** net.depth)
        state = mdl.build_model(net, coupling, seed=self.random_state)
        result = trn.train(state, to_channel_first(X), to_channel_first(y), cfg)
        self.state_ = result.state
        self.log_ = result.log
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict(self, X):
        """Deblurred images, same shape as ``X``."""
        check_is_fitted(self, "state_")
        X = check_images(X, multiple=2 ** self.state_.net.depth)
        return to_sample_first(trn.predict(self.state_, to_channel_first(X)))

    def score(self, X, y, sample_weight=None):
        """Mean PSNR (dB) of clipped predictions against ``y``."""
        pred = np.clip(self.predict(X), 0, 1)
        y = check_images(y, name="y")
        values = np.array([psnr(p, t) for p, t in zip(pred, y)])
        return float(np.average(values, weights=sample_weight))

    def _more_tags(self):
        return {"multioutput": True, "poor_score": True}
