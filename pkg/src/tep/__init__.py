"""Expectation propagation for the t-exponential family.

Modules: ``qalgebra`` (deformed exp/log and q-operations), ``student_t``
(Student-t as a t-exponential family member), ``ep_core`` (t-factorized EP
driver), ``bpm`` (Bayes point machine), ``stp`` (Student-t process
classification), ``gp_baseline`` (Gaussian EP baselines), ``datasets`` and
``experiments``/``cli``.
"""

__version__ = "0.1.0"
