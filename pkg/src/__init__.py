# Markov LSA inference toolkit
