"""Energy-guided latent exploration for augmenting sparse sets of mesh deformations."""
from ._accel import backend
from .arap import (ArapContext, ArapError, ProjectionResult, arap_energy, arap_gradient, arap_hessian_vertices,
                   energy, fit_rotations, highres_project, project_arap)
from .config import ConfigError, RunConfig
from .explorer import (AugmentReport, Candidate, LatentSpectrum, PerturbationParams, latent_augment,
                       latent_hessian, mmr_select, perturb, spectrum, step_size)
from .mesh import (CotanWeights, Mesh, MeshError, cotangent_laplacian, cotangent_weights, load_obj,
                   load_vertex_map, mean_curvature_smoothness, save_obj)
from .metrics import (MetricReport, coverage, interpolation_smoothness, reconstruction_error, sequence_l2,
                      smoothness)
from .pipeline import (DeformationSet, Entry, PipelineError, baseline_interp_augment, generate, interpolate,
                       load_run, run_glass, train_vanilla)
from .vae import FORMAT_TAG, Adam, LossBreakdown, TrainingError, VaeModel, load_model, save_model

__version__ = "0.1.0"
