"""Mean-singular-value (SVMax) regularization for embedding learning, from scratch on numpy."""
from .data import Dataset, gaussian_ring, hypersphere_classes, load_mnist, parse_idx, sample_batch
from .embedder import SVMaxEmbedder
from .errors import *  # noqa: F401,F403
from .gan import GanConfig, SVMaxGAN, train_gan
from .linalg import (SvBounds, SvdResult, grad_mean_singular_value, matrix_norms, mean_singular_value,
                     singular_values, sv_bounds, svd)
from .losses import (LabeledBatch, LossValue, angular_loss, contrastive_loss, loss_bounds, npair_loss,
                     svmax_bounded, svmax_unbounded, triplet_loss)
from .metrics import EvalReport, KMeans, kmeans, mode_coverage, nmi, recall_at_k
from .net import Network, SgdState, load_checkpoint, mlp, save_checkpoint, sgd_step
from .rng import Rng
from .trace import RunTrace

__version__ = "0.1.0"
