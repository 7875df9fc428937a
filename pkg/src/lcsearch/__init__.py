"""lcsearch: graph-based similarity search with compact quantized codes.

The index couples an HNSW-style layered proximity graph with two-level
quantized vector codes, and refines candidate distances by regressing each
stored vector from its graph neighbors (a shared closed-form weight vector,
or a learned per-vector regression codebook of M bytes).
"""

from .dataset import (VectorSet, GroundTruth, read_vectors, write_vectors,
                      read_ground_truth, write_ground_truth, synth_dataset,
                      synth_manifold, brute_force_knn)
from .metrics import EvalMetrics, recall_at
from .kmeans import KMeansCodebook, kmeans_train, kmeans_train_two_stage
from .pq import ProductQuantizer, pq_train, opq_train, pack_codes, unpack_codes
from .codec import (Codec, AdcTable, IdentityCodec, ScalarCodec, PcaCodec,
                    PqCodec, TwoLevelCodec, train_codec, parse_codec_spec,
                    save_codec, load_codec)

__version__ = "0.1.0"
