"""Class-incremental learning with open-set recognition at desk scale.

Supervised contrastive training, relational distillation over stored
exemplars, isometric exemplar selection and KNN-cosine outlier scoring,
built on a small numpy autodiff engine.
"""

__version__ = "0.1.0"
