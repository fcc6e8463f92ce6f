"""Text-to-image retrieval over pluggable feature vectors.

Two strategies share one stack: caption-based matching (query against
per-caption vectors, image scored by its best caption) and a learned joint
embedding space (query against projected image vectors). See the README
for the file formats and the CLI.
"""

from .captioner import (
    CaptionTrainConfig,
    LstmParams,
    LstmState,
    Vocabulary,
    caption_nll,
    greedy_decode,
    init_captioner,
    load_captioner,
    lstm_step,
    save_captioner,
    train_captioner,
)
from .embedding import (
    JointEmbeddingModel,
    PairBatch,
    ProjectionLayer,
    TrainConfig,
    init_model,
    load_model,
    loss_gradients,
    pair_loss,
    save_model,
    train,
)
from .errors import (
    DataError,
    DeepSeekError,
    FormatError,
    IntegrityError,
    ShapeError,
)
from .evaluation import (
    average_precision,
    mean_average_precision,
    precision_recall_at_k,
)
from .features import (
    HashedTextFeaturizer,
    featurize_text,
    read_caption_file,
    read_feature_file,
    read_jsonl_features,
    tokenize,
    write_feature_file,
    write_jsonl_features,
)
from .numerics import AdamState, Rng, adam_step, clip_gradients, gradient_check, matvec
from .retrieval import (
    MODE_CAPTION,
    MODE_EMBEDDING,
    IndexRecord,
    SearchResult,
    SourceRecord,
    VectorIndex,
    build_index,
    load_index,
    query_text,
    save_index,
    search,
)

__version__ = "0.1.0"
