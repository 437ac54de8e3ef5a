# Copyright 2026 The SeqMoE Authors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Sequential recommender with a mixture-of-adapter-experts transformer.

The heavy lifting lives in the compiled ``_core`` extension; this package
re-exports its surface: tokenized-stream masks, masked self-attention,
adapter/gate building blocks, the four training losses, ranking metrics,
the Bernoulli-reparameterized architecture search, and the data pipeline.
"""

from ._core import (  # noqa: F401
    __version__,
    adapter_forward,
    bo_search,
    bpr_loss,
    build_causal_mask,
    build_context_mask,
    compute_metrics,
    config_hash_of,
    cosine_similarity,
    cross_entropy,
    default_config,
    expected_improvement,
    gate_fuse,
    infonce_loss,
    layer_norm,
    make_synthetic_corpus,
    masked_self_attention,
    po_and_gradient,
    rank_ground_truth,
    report,
    run_stages,
    softmax,
    total_loss,
)
