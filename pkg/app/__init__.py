# app package - kNN diffusion bound toolkit
