"""TMAE: transformer-based multimodal autoencoder for medical-claims sequences.

Learns one embedding vector per patient from a year of claims, plus the
machinery around it: a synthetic claims generator with ground-truth cohorts,
a from-scratch autodiff substrate, and a clustering evaluation suite
(k-means, elbow/WSS, Calinski-Harabasz, Davies-Bouldin, PCA baseline,
cohort reports).
"""

__version__ = "0.1.0"

from .claims import (
    CodeVocabulary,
    Demographics,
    MedicalCode,
    Modality,
    ParseError,
    PatientRecord,
    Rejection,
    ValidationError,
    Visit,
    build_vocabulary,
    clean_record,
    encode_visit,
    load_claims,
    load_category_map,
    write_claims,
    write_category_map,
)
from .synth import (
    CohortSpec,
    LabeledDataset,
    generate_cohort,
    generate_condition_benchmark,
    generate_cost_tier_benchmark,
    save_dataset,
)
from .embeddings import (
    AgeGrouper,
    CostBinner,
    EmbeddingTables,
    fit_cost_bins,
    sinusoid_embed,
)
from .network import DecoderOutput, EncoderOutput, ModelConfig, joint_loss
from .training import (
    ModelState,
    TrainConfig,
    TrainingAbort,
    load_checkpoint,
    patient_embedding,
    save_checkpoint,
    train,
    train_variant,
)
from .clustering import (
    ClusteringResult,
    ClusterReport,
    calinski_harabasz,
    cluster_purity,
    cohort_report,
    davies_bouldin,
    elbow_select,
    kmeans,
    pca_fit_transform,
)
