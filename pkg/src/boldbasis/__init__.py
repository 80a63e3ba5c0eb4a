"""boldbasis: basis-space Bayesian activation and background-connectivity
mapping for 4D task fMRI volumes."""

__version__ = "0.1.0"

from .basis import (CompositeBasis, GlobalBasis, LocalBasis, back_project,
                    fit_composite_basis, fit_global_basis, fit_local_basis,
                    load_basis, project, save_basis)
from .connectivity import (ConnectivityMatrix, RoiCovariance,
                           induced_roi_covariance, rv_connectivity,
                           select_strong_pairs)
from .design import (DesignMatrix, StimulusSchedule, build_design,
                     double_gamma_hrf, read_events_csv)
from .errors import (BoldBasisError, ConfigError, IOFormatError,
                     NumericalError, StageError, ValidationError)
from .gibbs import (ModelSpec, PosteriorDraws, coefficient_summary,
                    contrast_draws, gibbs_fit, load_draws, save_draws,
                    transform_model)
from .simbas import (ContrastSpec, SignificanceMap, cluster_flags,
                     evaluate_fit, faces_vs_places_weights, simbas)
from .simulate import (SimConfig, SimulatedDataset, gen_activation_dataset,
                       gen_long_range, gen_null_dataset, gen_short_range,
                       voronoi_parcellation)
from .volume import (Parcellation, Volume4D, extract_roi, load_parcellation,
                     load_volume, save_parcellation, save_volume)
from .wavelets import (LongMemoryParams, WaveletPlan, dwt,
                       estimate_long_memory, idwt, make_plan)
