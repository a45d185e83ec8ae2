"""distembed: distribution-level autoencoding.

Invariant set encoders paired with conditional generators, trained so that
encoding a finite sample and regenerating recovers its source distribution,
plus the optimal-transport metrics and probes used to evaluate them.
"""

from .distributions import (GMMParams, GaussianParams, MetaDistributionSpec,
                            MultinomialParams, SampleSet, fit_gaussian, fit_gmm,
                            multinomial_gaussian_approx, sample_meta, sample_set)
from .encoders import (Embedding, EncoderConfig, build_encoder, encode, encode_chunked,
                       kme_encode, pooler_clt_probe, verify_distributional_invariance)
from .errors import (ConfigurationError, DistembedError, FitError, InsufficientDataError,
                     NumericError, TrainingError)
from .generators import (GeneratorConfig, LossValue, OracleReplay, build_generator, loss,
                         reconstruction_error, sample)
from .ot import (Coupling, SinkhornConfig, bures_geodesic, empirical_w2, gmm_geodesic,
                 mw2_gmm, sinkhorn_divergence, sliced_w2, w2_gaussian)
from .setconstruct import (LabeledDataset, SetSpec, categorical_mixture_sets, group_discrete,
                           kernel_sample, noise_inversion_sample, onehot_dataset,
                           prior_weighted_sample)
from .training import (RunRecord, TrainConfig, load_checkpoint, loss_clt_probe, train)

__version__ = "0.1.0"
