"""SPDNet on delay-embedded covariance matrices, with MDOP-selected embeddings."""

__version__ = "0.1.0"

from .embedding import EmbeddingParams, MdopConfig, delay_embed, mdop_epochs, mdop_lags
from .explain import gradcam_pp, paired_ttest, significance_mask, submatrix_zoom
from .features import FeatureSpec, augmented_cov, coherence, extract_features, sample_cov
from .network import SpdNet, load_checkpoint, model_backward, model_forward, save_checkpoint
from .signals import Dataset, GeneratorSpec, generate, load_dataset, save_dataset
from .spd import ensure_spd, logeuclid_dist, spd_exp, spd_log, sym_eig, sym_vectorize
from .training import PipelineConfig, TrainConfig, evaluate_within_session, roc_auc, train
