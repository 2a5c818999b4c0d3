"""Pipeline stages: segmentation, association, primitive fitting, contact completion."""
