# Services package for the RETAIN toolkit
# Numerical kernel, models, cohort generation, training and evaluation
