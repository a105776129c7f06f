"""Sequence-Density-Workbench
This software trains and compares density models for multivariate sequences:
deterministic and stochastic recurrent backbones combined with factorized,
leaked or autoregressive within-step emitters. It prepares the datasets, runs
training and evaluation under explicit likelihood conventions and carries the
numerical oracles used to verify the models.
"""

import SDW.errors
import SDW.datasets
import SDW.distributions
import SDW.models
import SDW.objectives
import SDW.data_log
import SDW.evaluation
import SDW.training
import SDW.config
import SDW.oracle
#import SDW.control
