"""Region-adaptive sampling for a toy diffusion transformer.

Subpackages by concern: deterministic token-sparse kernels (`kernels`), the
subset-capable transformer and its KV caches (`model`), the dense
forward/backward engine (`engine`), flow-matching training (`training`,
`dataset`), region selection (`selector`), the RAS Euler sampler (`sampler`),
diagnostics (`analysis`), checkpoint IO (`checkpoint`) and the CLI (`cli`).
"""

__version__ = "0.1.0"
