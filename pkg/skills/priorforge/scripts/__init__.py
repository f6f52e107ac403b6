# PriorForge package
