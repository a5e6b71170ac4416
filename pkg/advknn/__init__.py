# AdvKNN toolkit
__version__ = "1.0.0"
__author__ = "AdvKNN Team"
__description__ = "Train small image classifiers, defend them with kNN/DkNN, attack the defenses through a differentiable kNN block"
