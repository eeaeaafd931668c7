# Stateless helpers: pose geometry, scene synthesis, autodiff, pose-file analysis, seeded RNG.
