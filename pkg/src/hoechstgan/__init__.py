"""Virtual staining of immune markers from nuclear fluorescence.

One source channel (Hoechst) is translated into two target stains (CD3,
CD8) by a shared-encoder dual-decoder GAN. The package covers intensity
normalization, nucleus masks, a synthetic paired-stain oracle, the model
variants, training with a real-to-generated compositing curriculum, and
mask-intensity-ratio evaluation.
"""
from .errors import (AllExcluded, DegenerateReal, DegenerateSamples,
                     EmptyDataset, EmptyMask, FullMask, HoechstganError,
                     InvalidLabels, MissingPrerequisite, ModeMismatch,
                     NonFiniteLoss, NotMutual, PlacementFailure,
                     ResumeMismatch, ShapeMismatch, SlideTooSmall,
                     SpecMismatch, UnknownVariant)
from .preprocess import (DatasetStats, IntensityModel, Patch, StainStats,
                         compute_dataset_stats, extract_patches,
                         fit_intensity_model, fit_slide_model,
                         normalize_intensity, normalize_patch)
from .masks import MaskSet, classify_positive, ingest_nucleus_mask, label_blobs
from .synthdata import SynthParams, Triplet, generate_dataset, generate_triplet
from .model import (DiscriminatorSpec, GeneratorSpec, PatchDiscriminator,
                    SingleStainGenerator, StainGenerator, VariantAssembly,
                    build_variant, count_parameters, normalize_variant,
                    receptive_field, receptive_field_chain)
from .train import (CompositeSchedule, FractionalEpoch, TrainConfig,
                    beta, build_assembly, cgan_loss, cgan_loss_joint,
                    cgan_loss_separate, composite, l1_loss, learning_rate,
                    load_checkpoint, save_checkpoint,
                    total_generator_objective, train_loop, train_step,
                    validation_l1)
from .evaluate import (ABLATION_MODES, GridSample, MirRecord, MirReport,
                       ablate_encoder_input, aggregate_mir,
                       build_grid_samples, evaluate_model, mir, mir_rel,
                       plot_intensity_histogram, render_grid, score_pair)
from .dataio import PairedDataset
from .seeding import derive_seed

__version__ = "0.1.0"
