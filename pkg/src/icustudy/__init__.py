"""Observational-study toolkit for ICU cohorts.

Stages: flat-file cohort extraction with attrition accounting, study-row
assembly from irregular timelines, propensity-score quintile stratification
with ANOVA-based balance refinement, confounder-adjusted outcome models,
and an evolutionary-ML layer (k-means plus genetic-programming symbolic
regression/classification with counterfactual simulation).
"""

__version__ = "0.1.0"
